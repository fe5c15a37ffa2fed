//! Fixed-capacity frame buffer with batch eviction once per round.

use serde::{Deserialize, Serialize};

use crate::frames::ImagePayload;
use crate::segment::Score;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub image: ImagePayload,
    pub score: Score,
    pub acquired_round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    /// Lowest score first; ties go to the oldest round, then the smallest index.
    #[default]
    LowestScore,
    /// Oldest round first, then smallest index. Used when no scores exist.
    Fifo,
}

#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    capacity: usize,
    policy: EvictionPolicy,
    frames: Vec<FrameRecord>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, policy: EvictionPolicy) -> Self {
        assert!(capacity >= 1, "memory capacity must be at least 1");
        MemoryBuffer {
            capacity,
            policy,
            frames: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    /// Retained frames in timeline order.
    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self) -> Vec<u64> {
        self.frames.iter().map(|f| f.frame_index).collect()
    }

    /// Inserts `new_frames`, then evicts until the buffer fits its capacity.
    ///
    /// A frame index already in memory keeps whichever record has the higher
    /// score; on an exact tie the newer record replaces the older one.
    /// Returns the evicted records, lowest priority first.
    pub fn update(&mut self, new_frames: Vec<FrameRecord>) -> Vec<FrameRecord> {
        for f in new_frames {
            match self
                .frames
                .binary_search_by_key(&f.frame_index, |r| r.frame_index)
            {
                Ok(i) => {
                    if f.score >= self.frames[i].score {
                        self.frames[i] = f;
                    }
                }
                Err(i) => self.frames.insert(i, f),
            }
        }
        if self.frames.len() <= self.capacity {
            return Vec::new();
        }

        let excess = self.frames.len() - self.capacity;
        let mut order: Vec<usize> = (0..self.frames.len()).collect();
        match self.policy {
            EvictionPolicy::LowestScore => order.sort_by_key(|&i| {
                let f = &self.frames[i];
                (f.score, f.acquired_round, f.frame_index)
            }),
            EvictionPolicy::Fifo => order.sort_by_key(|&i| {
                let f = &self.frames[i];
                (f.acquired_round, f.frame_index)
            }),
        }
        let doomed: Vec<usize> = order[..excess].to_vec();
        let evicted: Vec<FrameRecord> = doomed.iter().map(|&i| self.frames[i].clone()).collect();
        let mut keep = vec![true; self.frames.len()];
        for i in doomed {
            keep[i] = false;
        }
        let mut k = keep.into_iter();
        self.frames.retain(|_| k.next().unwrap());
        evicted
    }
}
