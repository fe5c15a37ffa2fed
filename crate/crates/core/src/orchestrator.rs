//! The exploration loop: sample, score, update frontier, history and memory,
//! then answer or pick the next segment.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::backend::ChatBackend;
use crate::error::{Error, Result};
use crate::explorer::{self, Decision, ExploreOptions};
use crate::frames::{uniform_sample, VideoHandle};
use crate::memory::{EvictionPolicy, FrameRecord, MemoryBuffer};
use crate::prompt::Templates;
use crate::reward::{score_segments, RewardHistory, RewardVerdict, VerdictItem};
use crate::segment::{CandidateSet, RewardedSegment, Score, Segment, SegmentId, SegmentTree};
use crate::trace::{EpisodeTrace, FrontierEntry, RoundRecord, TraceHeader, TRACE_SCHEMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    /// Skip the reward model; candidates carry no scores and memory is FIFO.
    NoReward,
    /// The agent names absolute frame indices instead of tree segments.
    NoTree,
    /// Scores come from the ground-truth interval instead of the reward model.
    GtReward,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Mode::Full),
            "no_reward" => Ok(Mode::NoReward),
            "no_tree" => Ok(Mode::NoTree),
            "gt_reward" => Ok(Mode::GtReward),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::NoReward => "no_reward",
            Mode::NoTree => "no_tree",
            Mode::GtReward => "gt_reward",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub n_sample: usize,
    pub buffer_capacity: usize,
    pub max_rounds: u32,
    pub mode: Mode,
    /// Ground-truth span in seconds, required by [`Mode::GtReward`].
    pub gt_interval: Option<(f64, f64)>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_sample: 4,
            buffer_capacity: 8,
            max_rounds: 10,
            mode: Mode::Full,
            gt_interval: None,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sample == 0 {
            return Err(Error::InvalidConfig("n_sample must be at least 1".into()));
        }
        if self.n_sample > self.buffer_capacity {
            return Err(Error::InvalidConfig(format!(
                "n_sample {} exceeds buffer capacity {}",
                self.n_sample, self.buffer_capacity
            )));
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidConfig("max_rounds must be at least 1".into()));
        }
        if self.mode == Mode::GtReward && self.gt_interval.is_none() {
            return Err(Error::InvalidConfig(
                "gt_reward mode needs gt_interval".into(),
            ));
        }
        if let Some((s, e)) = self.gt_interval {
            if !(s >= 0.0 && e > s) {
                return Err(Error::InvalidConfig(format!("bad gt_interval ({s}, {e})")));
            }
        }
        Ok(())
    }
}

/// Ground-truth interval in frames, clipped to the video.
fn gt_frames(video: &VideoHandle, (s, e): (f64, f64)) -> Result<(u64, u64)> {
    let start = (s * video.frame_rate).floor() as u64;
    let end = ((e * video.frame_rate).ceil() as u64).min(video.total_frames);
    if start >= end {
        return Err(Error::InvalidConfig(format!(
            "gt_interval ({s}, {e}) lies outside the video"
        )));
    }
    Ok((start, end))
}

/// Scores proportional to overlap with the ground truth:
/// `100 * overlap / min(|seg|, |gt|)`, rounded, never below 5.
pub fn gt_reward_scores(subsegments: &[Segment], gt: (u64, u64)) -> RewardVerdict {
    let gt_len = gt.1 - gt.0;
    RewardVerdict {
        items: subsegments
            .iter()
            .map(|s| {
                let overlap = s.overlap(gt.0, gt.1);
                let denom = s.len().min(gt_len).max(1);
                let pct = ((100 * overlap) as f64 / denom as f64).round() as u32;
                VerdictItem {
                    explanation: "ground-truth reference".into(),
                    score: Score::new(pct.clamp(5, 100)).unwrap(),
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub answer: String,
    pub trace: EpisodeTrace,
}

/// Backends and templates for one or more episodes. The reward model and the
/// exploration agent may share a backend.
pub struct Agent<'a> {
    reward: &'a dyn ChatBackend,
    explorer: &'a dyn ChatBackend,
    templates: &'a Templates,
}

impl<'a> Agent<'a> {
    pub fn new(backend: &'a dyn ChatBackend, templates: &'a Templates) -> Self {
        Agent {
            reward: backend,
            explorer: backend,
            templates,
        }
    }

    pub fn with_reward_backend(mut self, reward: &'a dyn ChatBackend) -> Self {
        self.reward = reward;
        self
    }

    pub fn run(&self, video: &VideoHandle, query: &str, cfg: &EpisodeConfig) -> Result<Outcome> {
        cfg.validate()?;
        let gt = cfg.gt_interval.map(|g| gt_frames(video, g)).transpose()?;
        let mut ep = Episode::new(self, video, query, cfg, gt);
        let answer = match cfg.mode {
            Mode::NoTree => ep.run_frames()?,
            _ => ep.run_tree()?,
        };
        let total_unique_frames = ep.seen.len() as u64;
        Ok(Outcome {
            answer: answer.clone(),
            trace: EpisodeTrace {
                header: ep.header,
                rounds: ep.rounds,
                final_answer: answer,
                total_unique_frames,
            },
        })
    }
}

/// Runs one episode with a single backend serving both roles.
pub fn run_episode(
    backend: &dyn ChatBackend,
    video: &VideoHandle,
    query: &str,
    cfg: &EpisodeConfig,
) -> Result<Outcome> {
    let templates = Templates::default();
    Agent::new(backend, &templates).run(video, query, cfg)
}

enum Step {
    Answered(String),
    Next(SegmentId),
    Frames(Vec<u64>),
}

struct Episode<'e, 'a> {
    agent: &'e Agent<'a>,
    video: &'e VideoHandle,
    query: &'e str,
    cfg: &'e EpisodeConfig,
    gt: Option<(u64, u64)>,
    tree: SegmentTree,
    frontier: CandidateSet,
    history: RewardHistory,
    memory: MemoryBuffer,
    seen: BTreeSet<u64>,
    header: TraceHeader,
    rounds: Vec<RoundRecord>,
}

impl<'e, 'a> Episode<'e, 'a> {
    fn new(
        agent: &'e Agent<'a>,
        video: &'e VideoHandle,
        query: &'e str,
        cfg: &'e EpisodeConfig,
        gt: Option<(u64, u64)>,
    ) -> Self {
        let policy = if cfg.mode == Mode::NoReward {
            EvictionPolicy::Fifo
        } else {
            EvictionPolicy::LowestScore
        };
        Episode {
            agent,
            video,
            query,
            cfg,
            gt,
            tree: SegmentTree::new(video.total_frames),
            frontier: CandidateSet::new(video.total_frames),
            history: RewardHistory::default(),
            memory: MemoryBuffer::new(cfg.buffer_capacity, policy),
            seen: BTreeSet::new(),
            header: TraceHeader {
                schema: TRACE_SCHEMA.into(),
                video_id: video.id.clone(),
                total_frames: video.total_frames,
                frame_rate: video.frame_rate,
                query: query.to_string(),
                mode: cfg.mode,
                n_sample: cfg.n_sample,
                buffer_capacity: cfg.buffer_capacity,
                max_rounds: cfg.max_rounds,
                gt_interval: cfg.gt_interval,
            },
            rounds: Vec::new(),
        }
    }

    fn options(&self, forced: bool) -> ExploreOptions {
        ExploreOptions {
            show_scores: self.cfg.mode != Mode::NoReward,
            forced,
            frame_rate: self.video.frame_rate,
        }
    }

    fn run_tree(&mut self) -> Result<String> {
        let mut selected = self.tree.root().id;
        for round in 1..=self.cfg.max_rounds {
            match self
                .tree_round(round, selected)
                .map_err(|e| e.at_round(round))?
            {
                Step::Answered(a) => return Ok(a),
                Step::Next(id) => selected = id,
                Step::Frames(_) => unreachable!("tree rounds never request frames"),
            }
        }
        self.forced_round(self.cfg.max_rounds + 1)
    }

    fn run_frames(&mut self) -> Result<String> {
        let mut positions = uniform_sample(self.tree.root(), self.cfg.n_sample);
        for round in 1..=self.cfg.max_rounds {
            match self
                .frames_round(round, &positions)
                .map_err(|e| e.at_round(round))?
            {
                Step::Answered(a) => return Ok(a),
                Step::Frames(p) => positions = p,
                Step::Next(_) => unreachable!("frame rounds never select segments"),
            }
        }
        self.forced_round(self.cfg.max_rounds + 1)
    }

    /// Scores `children` according to the mode and extends the history.
    fn score(
        &mut self,
        round: u32,
        children: &[Segment],
        frames: &[crate::frames::ImagePayload],
    ) -> Result<(Option<RewardVerdict>, u32)> {
        match self.cfg.mode {
            Mode::NoReward => Ok((None, 0)),
            Mode::GtReward => {
                let v = gt_reward_scores(children, self.gt.expect("validated"));
                self.history.extend(round, children, &v);
                Ok((Some(v), 0))
            }
            Mode::Full | Mode::NoTree => {
                let (v, retries) = score_segments(
                    self.agent.reward,
                    self.agent.templates,
                    round,
                    self.query,
                    children,
                    frames,
                    &mut self.history,
                    self.video.frame_rate,
                )?;
                Ok((Some(v), retries))
            }
        }
    }

    fn rewarded(
        round: u32,
        children: &[Segment],
        verdict: Option<&RewardVerdict>,
    ) -> Vec<RewardedSegment> {
        children
            .iter()
            .enumerate()
            .map(|(i, c)| RewardedSegment {
                segment: *c,
                score: verdict.map(|v| v.items[i].score),
                explanation: verdict
                    .map(|v| v.items[i].explanation.clone())
                    .unwrap_or_default(),
                round,
            })
            .collect()
    }

    fn tree_round(&mut self, round: u32, selected: SegmentId) -> Result<Step> {
        let seg = *self
            .tree
            .get(selected)
            .ok_or(Error::UnknownSegment(selected))?;
        let positions = uniform_sample(&seg, self.cfg.n_sample);
        let children = self.tree.split(selected, &positions)?;
        let frames = self.video.fetch_frames(&positions)?;
        self.seen.extend(positions.iter().copied());

        let (verdict, mut retries) = self.score(round, &children, &frames)?;
        self.frontier
            .replace(&seg, Self::rewarded(round, &children, verdict.as_ref()))?;

        let frame_scores = verdict
            .as_ref()
            .map(|v| v.frame_scores())
            .unwrap_or_else(|| vec![Score::new(0).unwrap(); positions.len()]);
        let records = positions
            .iter()
            .zip(frames)
            .zip(frame_scores)
            .map(|((&frame_index, image), score)| FrameRecord {
                frame_index,
                image,
                score,
                acquired_round: round,
            })
            .collect();
        let evicted = self.memory.update(records);

        let forced = !self.frontier.has_selectable();
        let (decision, r) = explorer::decide(
            self.agent.explorer,
            self.agent.templates,
            self.query,
            &self.frontier,
            &self.memory,
            &self.options(forced),
        )?;
        retries += r;
        debug!(round, %seg, ?decision, "round complete");

        self.rounds.push(RoundRecord {
            round,
            selected: Some(seg),
            sampled: positions,
            subsegments: children,
            verdict,
            frontier: FrontierEntry::snapshot(&self.frontier),
            history_len: self.history.len(),
            memory: self.memory.indices(),
            evicted: evicted.iter().map(|f| f.frame_index).collect(),
            decision: decision.clone(),
            forced,
            retries,
        });
        Ok(match decision {
            Decision::Answer { text } => Step::Answered(text),
            Decision::Explore { segment } => Step::Next(segment),
            Decision::Frames { .. } => unreachable!("validated by decide"),
        })
    }

    fn frames_round(&mut self, round: u32, positions: &[u64]) -> Result<Step> {
        let boundaries: Vec<u64> = positions.iter().copied().filter(|&p| p > 0).collect();
        let root = self.tree.root().id;
        let children = self.tree.split(root, &boundaries)?;
        let frames = self.video.fetch_frames(positions)?;
        self.seen.extend(positions.iter().copied());

        let (verdict, mut retries) = self.score(round, &children, &frames)?;
        self.frontier
            .reset(Self::rewarded(round, &children, verdict.as_ref()))?;

        let verdict_ref = verdict
            .as_ref()
            .expect("frame-index rounds are always scored");
        let boundary_scores = verdict_ref.frame_scores();
        let mut b = 0;
        let records = positions
            .iter()
            .zip(frames)
            .map(|(&frame_index, image)| {
                let score = if frame_index == 0 {
                    verdict_ref.items[0].score
                } else {
                    b += 1;
                    boundary_scores[b - 1]
                };
                FrameRecord {
                    frame_index,
                    image,
                    score,
                    acquired_round: round,
                }
            })
            .collect();
        let evicted = self.memory.update(records);

        let (decision, r) = explorer::choose_frames(
            self.agent.explorer,
            self.agent.templates,
            self.query,
            &self.frontier,
            &self.memory,
            self.cfg.n_sample,
            &self.options(false),
        )?;
        retries += r;

        self.rounds.push(RoundRecord {
            round,
            selected: None,
            sampled: positions.to_vec(),
            subsegments: children,
            verdict,
            frontier: FrontierEntry::snapshot(&self.frontier),
            history_len: self.history.len(),
            memory: self.memory.indices(),
            evicted: evicted.iter().map(|f| f.frame_index).collect(),
            decision: decision.clone(),
            forced: false,
            retries,
        });
        Ok(match decision {
            Decision::Answer { text } => Step::Answered(text),
            Decision::Frames { indices } => Step::Frames(indices),
            Decision::Explore { .. } => unreachable!("validated by choose_frames"),
        })
    }

    /// Final attempt once the round budget is spent.
    fn forced_round(&mut self, round: u32) -> Result<String> {
        let opts = self.options(true);
        let result = if self.cfg.mode == Mode::NoTree {
            explorer::choose_frames(
                self.agent.explorer,
                self.agent.templates,
                self.query,
                &self.frontier,
                &self.memory,
                self.cfg.n_sample,
                &opts,
            )
        } else {
            explorer::decide(
                self.agent.explorer,
                self.agent.templates,
                self.query,
                &self.frontier,
                &self.memory,
                &opts,
            )
        };
        let (decision, retries) = match result {
            Ok(ok) => ok,
            Err(Error::BudgetExhausted) => return Err(Error::BudgetExhausted),
            Err(e) => return Err(e.at_round(round)),
        };
        self.rounds.push(RoundRecord {
            round,
            selected: None,
            sampled: Vec::new(),
            subsegments: Vec::new(),
            verdict: None,
            frontier: FrontierEntry::snapshot(&self.frontier),
            history_len: self.history.len(),
            memory: self.memory.indices(),
            evicted: Vec::new(),
            decision: decision.clone(),
            forced: true,
            retries,
        });
        match decision {
            Decision::Answer { text } => Ok(text),
            _ => Err(Error::BudgetExhausted),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(start: u64, end: u64) -> Segment {
        Segment {
            id: 1,
            start,
            end,
            depth: 1,
            parent: Some(0),
        }
    }

    fn score_of(s: Segment, gt: (u64, u64)) -> u32 {
        gt_reward_scores(&[s], gt).items[0].score.value()
    }

    #[test]
    fn gt_score_examples() {
        assert_eq!(score_of(seg(0, 200), (50, 60)), 100);
        assert_eq!(score_of(seg(0, 200), (500, 600)), 5);
        // overlap is half of the ground truth and the segment is longer
        assert_eq!(score_of(seg(0, 200), (180, 220)), 50);
    }

    #[test]
    fn config_validation() {
        EpisodeConfig::default().validate().unwrap();
        let bad = [
            EpisodeConfig {
                n_sample: 0,
                ..Default::default()
            },
            EpisodeConfig {
                n_sample: 9,
                buffer_capacity: 8,
                ..Default::default()
            },
            EpisodeConfig {
                mode: Mode::GtReward,
                ..Default::default()
            },
            EpisodeConfig {
                max_rounds: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("no-tree".parse::<Mode>().unwrap(), Mode::NoTree);
        assert_eq!("gt_reward".parse::<Mode>().unwrap(), Mode::GtReward);
        assert!("greedy".parse::<Mode>().is_err());
    }
}
