//! Segment-interval algebra: the exploration tree and its frontier.
//!
//! Intervals are half-open `[start, end)` frame ranges, so sibling
//! sub-segments never share a frame and the frontier is an exact partition
//! of the video once the root has been expanded.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SegmentId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub id: SegmentId,
    pub start: u64,
    pub end: u64,
    pub depth: u32,
    pub parent: Option<SegmentId>,
}

impl Segment {
    pub fn root(total_frames: u64) -> Self {
        Segment {
            id: 0,
            start: 0,
            end: total_frames,
            depth: 0,
            parent: None,
        }
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, index: u64) -> bool {
        self.start <= index && index < self.end
    }

    /// Number of frames shared with `[start, end)`.
    pub fn overlap(&self, start: u64, end: u64) -> u64 {
        self.end.min(end).saturating_sub(self.start.max(start))
    }

    /// A segment with no interior frame cannot be split any further.
    pub fn is_terminal(&self) -> bool {
        self.len() <= 1
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} [{}, {})", self.id, self.start, self.end)
    }
}

/// Relevance score on the integer percent scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Score(u8);

impl Score {
    pub const MAX: Score = Score(100);

    pub fn new(value: u32) -> Option<Score> {
        (value <= 100).then_some(Score(value as u8))
    }

    pub fn value(self) -> u32 {
        self.0 as u32
    }
}

impl TryFrom<u32> for Score {
    type Error = String;

    fn try_from(value: u32) -> std::result::Result<Self, Self::Error> {
        Score::new(value).ok_or_else(|| format!("score {value} outside [0, 100]"))
    }
}

impl From<Score> for u32 {
    fn from(s: Score) -> u32 {
        s.value()
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A frontier entry. `score` is absent when exploring without a reward model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardedSegment {
    pub segment: Segment,
    pub score: Option<Score>,
    pub explanation: String,
    /// Round in which the score was assigned.
    pub round: u32,
}

impl RewardedSegment {
    pub fn selectable(&self) -> bool {
        !self.segment.is_terminal()
    }
}

/// Splits `seg` at `positions`, assigning child ids from `next_id`.
///
/// Returns `positions.len() + 1` children covering `seg` exactly.
pub fn split_segment(
    seg: &Segment,
    positions: &[u64],
    next_id: &mut SegmentId,
) -> Result<Vec<Segment>> {
    let mut prev = seg.start;
    for &p in positions {
        if p <= prev || p >= seg.end {
            return Err(Error::PositionOutOfRange {
                position: p,
                start: seg.start,
                end: seg.end,
            });
        }
        prev = p;
    }

    let bounds = std::iter::once(seg.start)
        .chain(positions.iter().copied())
        .chain(std::iter::once(seg.end));
    let starts: Vec<u64> = bounds.collect();
    Ok(starts
        .windows(2)
        .map(|w| {
            let id = *next_id;
            *next_id += 1;
            Segment {
                id,
                start: w[0],
                end: w[1],
                depth: seg.depth + 1,
                parent: Some(seg.id),
            }
        })
        .collect())
}

/// Every segment created during one episode, indexed by id.
#[derive(Debug, Clone)]
pub struct SegmentTree {
    nodes: Vec<Segment>,
}

impl SegmentTree {
    pub fn new(total_frames: u64) -> Self {
        SegmentTree {
            nodes: vec![Segment::root(total_frames)],
        }
    }

    pub fn root(&self) -> &Segment {
        &self.nodes[0]
    }

    pub fn get(&self, id: SegmentId) -> Option<&Segment> {
        self.nodes.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Splits the segment `id` and records the children in the tree.
    pub fn split(&mut self, id: SegmentId, positions: &[u64]) -> Result<Vec<Segment>> {
        let seg = *self.get(id).ok_or(Error::NotInFrontier(id))?;
        let mut next = self.nodes.len() as SegmentId;
        let children = split_segment(&seg, positions, &mut next)?;
        self.nodes.extend_from_slice(&children);
        Ok(children)
    }

    /// Ids from `id` up to and including the root.
    pub fn ancestry(&self, id: SegmentId) -> Vec<SegmentId> {
        let mut out = vec![id];
        let mut cur = self.get(id).and_then(|s| s.parent);
        while let Some(p) = cur {
            out.push(p);
            cur = self.get(p).and_then(|s| s.parent);
        }
        out
    }
}

/// The frontier `S`: unexplored segments with their latest reward annotation,
/// kept in temporal order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    entries: Vec<RewardedSegment>,
    root_span: (u64, u64),
}

impl CandidateSet {
    pub fn new(total_frames: u64) -> Self {
        CandidateSet {
            entries: Vec::new(),
            root_span: (0, total_frames),
        }
    }

    pub fn entries(&self) -> &[RewardedSegment] {
        &self.entries
    }

    pub fn root_span(&self) -> (u64, u64) {
        self.root_span
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, id: SegmentId) -> Option<&RewardedSegment> {
        self.entries.iter().find(|e| e.segment.id == id)
    }

    /// Entries the agent may still choose to expand.
    pub fn selectable(&self) -> impl Iterator<Item = &RewardedSegment> {
        self.entries.iter().filter(|e| e.selectable())
    }

    pub fn has_selectable(&self) -> bool {
        self.selectable().next().is_some()
    }

    /// Removes `parent` and inserts its `children`, which must partition it.
    /// The root may only be expanded while the set is still empty.
    pub fn replace(&mut self, parent: &Segment, children: Vec<RewardedSegment>) -> Result<()> {
        let is_root = parent.parent.is_none() && (parent.start, parent.end) == self.root_span;
        let pos = self.entries.iter().position(|e| e.segment.id == parent.id);
        if pos.is_none() && !(is_root && self.entries.is_empty()) {
            return Err(Error::NotInFrontier(parent.id));
        }
        let mut cursor = parent.start;
        for c in &children {
            if c.segment.start != cursor || c.segment.end <= c.segment.start {
                return Err(Error::InvalidPartition(parent.id));
            }
            cursor = c.segment.end;
        }
        if cursor != parent.end {
            return Err(Error::InvalidPartition(parent.id));
        }

        if let Some(i) = pos {
            self.entries.remove(i);
        }
        self.entries.extend(children);
        self.entries.sort_by_key(|e| e.segment.start);
        Ok(())
    }

    /// Discards every entry and installs a fresh partition of the root span.
    pub fn reset(&mut self, children: Vec<RewardedSegment>) -> Result<()> {
        let root = Segment::root(self.root_span.1);
        self.entries.clear();
        self.replace(&root, children)
    }

    /// True when entries are pairwise disjoint and cover the root span exactly.
    pub fn is_partition(&self) -> bool {
        let mut cursor = self.root_span.0;
        for e in &self.entries {
            if e.segment.start != cursor || e.segment.is_empty() {
                return false;
            }
            cursor = e.segment.end;
        }
        cursor == self.root_span.1
    }
}
