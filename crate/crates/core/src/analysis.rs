//! Segment-distance analysis: how far, in sibling-rank units, the agent's
//! choice and the highest-reward choice fall from the sub-segment that
//! overlaps the ground truth most.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::explorer::Decision;
use crate::trace::{EpisodeTrace, RoundRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundDistance {
    pub round: u32,
    /// |rank(agent choice) - rank(ground truth)|, when the agent expanded one
    /// of this round's sub-segments.
    pub agent: Option<u64>,
    /// |rank(argmax reward) - rank(ground truth)|.
    pub greedy: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRound {
    pub trace: String,
    pub round: u32,
    pub reason: String,
}

fn rank_of_gt(round: &RoundRecord, gt: (u64, u64)) -> Option<usize> {
    let overlaps: Vec<u64> = round
        .subsegments
        .iter()
        .map(|s| s.overlap(gt.0, gt.1))
        .collect();
    let best = *overlaps.iter().max()?;
    (best > 0).then(|| overlaps.iter().position(|&o| o == best).unwrap())
}

/// Per-round distances; rounds without the data to measure them are
/// reported as skipped.
pub fn round_distances(
    trace: &EpisodeTrace,
    gt: (u64, u64),
) -> (Vec<RoundDistance>, Vec<(u32, String)>) {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for r in &trace.rounds {
        if r.subsegments.is_empty() {
            skipped.push((r.round, "no sub-segments (forced answer)".to_string()));
            continue;
        }
        let Some(gt_rank) = rank_of_gt(r, gt) else {
            skipped.push((
                r.round,
                "no sub-segment overlaps the ground truth".to_string(),
            ));
            continue;
        };
        let greedy = r
            .verdict
            .as_ref()
            .and_then(|v| v.argmax())
            .map(|g| g.abs_diff(gt_rank) as u64);
        let agent = match &r.decision {
            Decision::Explore { segment } => r
                .subsegments
                .iter()
                .position(|s| s.id == *segment)
                .map(|a| a.abs_diff(gt_rank) as u64),
            _ => None,
        };
        if agent.is_none() && greedy.is_none() {
            skipped.push((
                r.round,
                "neither an agent choice among this round's sub-segments nor scores".to_string(),
            ));
            continue;
        }
        out.push(RoundDistance {
            round: r.round,
            agent,
            greedy,
        });
    }
    (out, skipped)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub status: String,
    pub traces: usize,
    pub agent_histogram: BTreeMap<u64, usize>,
    pub greedy_histogram: BTreeMap<u64, usize>,
    pub agent_mean: Option<f64>,
    pub greedy_mean: Option<f64>,
    /// Mean of (agent - greedy) over rounds where both are defined.
    pub mean_gap: Option<f64>,
    pub paired_rounds: usize,
    pub skipped: Vec<SkippedRound>,
}

fn mean(v: &[u64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<u64>() as f64 / v.len() as f64)
}

impl DistanceReport {
    pub fn empty(status: impl Into<String>) -> Self {
        DistanceReport {
            status: status.into(),
            ..Default::default()
        }
    }

    /// Aggregates `(trace name, trace, ground truth in frames)` triples.
    pub fn build<'a>(
        items: impl IntoIterator<Item = (String, &'a EpisodeTrace, (u64, u64))>,
    ) -> Self {
        let mut report = DistanceReport::default();
        let (mut agent, mut greedy, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
        for (name, trace, gt) in items {
            report.traces += 1;
            let (rounds, skipped) = round_distances(trace, gt);
            for (round, reason) in skipped {
                report.skipped.push(SkippedRound {
                    trace: name.clone(),
                    round,
                    reason,
                });
            }
            for d in rounds {
                if let Some(a) = d.agent {
                    agent.push(a);
                    *report.agent_histogram.entry(a).or_default() += 1;
                }
                if let Some(g) = d.greedy {
                    greedy.push(g);
                    *report.greedy_histogram.entry(g).or_default() += 1;
                }
                if let (Some(a), Some(g)) = (d.agent, d.greedy) {
                    gaps.push(a as f64 - g as f64);
                }
            }
        }
        report.agent_mean = mean(&agent);
        report.greedy_mean = mean(&greedy);
        report.paired_rounds = gaps.len();
        report.mean_gap = (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
        report.status = if report.traces == 0 {
            "no traces with a ground-truth interval".into()
        } else {
            "ok".into()
        };
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::Mode;
    use crate::reward::{RewardVerdict, VerdictItem};
    use crate::segment::{Score, Segment};
    use crate::trace::{TraceHeader, TRACE_SCHEMA};

    fn round(n: u32, bounds: &[u64], scores: &[u32], chosen: usize) -> RoundRecord {
        let subsegments: Vec<Segment> = bounds
            .windows(2)
            .enumerate()
            .map(|(i, w)| Segment {
                id: n * 10 + i as u32,
                start: w[0],
                end: w[1],
                depth: n,
                parent: Some(0),
            })
            .collect();
        RoundRecord {
            round: n,
            selected: None,
            sampled: bounds[1..bounds.len() - 1].to_vec(),
            decision: Decision::Explore {
                segment: subsegments[chosen].id,
            },
            subsegments,
            verdict: Some(RewardVerdict {
                items: scores
                    .iter()
                    .map(|&s| VerdictItem {
                        explanation: String::new(),
                        score: Score::new(s).unwrap(),
                    })
                    .collect(),
            }),
            frontier: vec![],
            history_len: 0,
            memory: vec![],
            evicted: vec![],
            forced: false,
            retries: 0,
        }
    }

    fn trace(rounds: Vec<RoundRecord>) -> EpisodeTrace {
        EpisodeTrace {
            header: TraceHeader {
                schema: TRACE_SCHEMA.into(),
                video_id: "v".into(),
                total_frames: 100,
                frame_rate: 1.0,
                query: "q".into(),
                mode: Mode::Full,
                n_sample: 4,
                buffer_capacity: 8,
                max_rounds: 10,
                gt_interval: None,
            },
            rounds,
            final_answer: "A".into(),
            total_unique_frames: 4,
        }
    }

    #[test]
    fn constructed_gap() {
        // gt lies in rank 2; agent picks rank 1 (distance 1), greedy rank 4 (distance 2)
        let t = trace(vec![round(
            1,
            &[0, 20, 40, 60, 80, 100],
            &[10, 10, 10, 10, 90],
            1,
        )]);
        let report = DistanceReport::build([("t".to_string(), &t, (45, 50))]);
        assert_eq!(report.agent_mean, Some(1.0));
        assert_eq!(report.greedy_mean, Some(2.0));
        assert_eq!(report.mean_gap, Some(-1.0));
    }

    #[test]
    fn skips_rounds_without_overlap() {
        let t = trace(vec![round(1, &[0, 50, 100], &[10, 90], 1)]);
        let report = DistanceReport::build([("t".to_string(), &t, (200, 210))]);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.agent_mean, None);
    }

    #[test]
    fn empty_report_status() {
        let r = DistanceReport::build(std::iter::empty());
        assert!(r.status.contains("no traces"));
    }
}
