//! Replayable episode log, written as line-delimited JSON records.
//!
//! A trace file holds one `header` record, one `round` record per round,
//! and a closing `summary` record.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explorer::Decision;
use crate::orchestrator::Mode;
use crate::reward::RewardVerdict;
use crate::segment::{CandidateSet, Score, Segment, SegmentId};

pub const TRACE_SCHEMA: &str = "vca-trace/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub video_id: String,
    pub total_frames: u64,
    pub frame_rate: f64,
    pub query: String,
    pub mode: Mode,
    pub n_sample: usize,
    pub buffer_capacity: usize,
    pub max_rounds: u32,
    #[serde(default)]
    pub gt_interval: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontierEntry {
    pub id: SegmentId,
    pub start: u64,
    pub end: u64,
    pub score: Option<Score>,
    pub selectable: bool,
}

impl FrontierEntry {
    pub fn snapshot(frontier: &CandidateSet) -> Vec<FrontierEntry> {
        frontier
            .entries()
            .iter()
            .map(|e| FrontierEntry {
                id: e.segment.id,
                start: e.segment.start,
                end: e.segment.end,
                score: e.score,
                selectable: e.selectable(),
            })
            .collect()
    }
}

/// One loop iteration, fields in the order the loop produces them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Segment expanded this round; absent for frame-index rounds and the
    /// forced-answer round.
    pub selected: Option<Segment>,
    pub sampled: Vec<u64>,
    pub subsegments: Vec<Segment>,
    pub verdict: Option<RewardVerdict>,
    pub frontier: Vec<FrontierEntry>,
    pub history_len: usize,
    pub memory: Vec<u64>,
    pub evicted: Vec<u64>,
    pub decision: Decision,
    pub forced: bool,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub answer: String,
    pub rounds: u32,
    pub total_unique_frames: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceRecord {
    Header(TraceHeader),
    Round(RoundRecord),
    Summary(EpisodeSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub header: TraceHeader,
    pub rounds: Vec<RoundRecord>,
    pub final_answer: String,
    pub total_unique_frames: u64,
}

impl EpisodeTrace {
    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            answer: self.final_answer.clone(),
            rounds: self.rounds.len() as u32,
            total_unique_frames: self.total_unique_frames,
        }
    }

    /// Union of every sampled index, recomputed from the round records.
    pub fn unique_sampled(&self) -> u64 {
        let mut all: Vec<u64> = self
            .rounds
            .iter()
            .flat_map(|r| r.sampled.iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all.len() as u64
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &TraceRecord| {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        };
        push(&TraceRecord::Header(self.header.clone()));
        for r in &self.rounds {
            push(&TraceRecord::Round(r.clone()));
        }
        push(&TraceRecord::Summary(self.summary()));
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut rounds = Vec::new();
        let mut summary = None;
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: TraceRecord = serde_json::from_str(line)
                .map_err(|e| Error::InvalidConfig(format!("trace line {}: {e}", n + 1)))?;
            match rec {
                TraceRecord::Header(h) => {
                    if h.schema != TRACE_SCHEMA {
                        return Err(Error::InvalidConfig(format!(
                            "unsupported trace schema {}",
                            h.schema
                        )));
                    }
                    header = Some(h)
                }
                TraceRecord::Round(r) => rounds.push(r),
                TraceRecord::Summary(s) => summary = Some(s),
            }
        }
        let header = header.ok_or_else(|| Error::InvalidConfig("trace has no header".into()))?;
        let summary = summary.ok_or_else(|| Error::InvalidConfig("trace has no summary".into()))?;
        Ok(EpisodeTrace {
            header,
            rounds,
            final_answer: summary.answer,
            total_unique_frames: summary.total_unique_frames,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}
