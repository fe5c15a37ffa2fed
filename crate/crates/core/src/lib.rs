//! Question answering over long frame sequences by reward-guided
//! exploration of a segment tree.
//!
//! An episode starts from the whole video, samples a few evenly spaced
//! frames, asks a chat model to explain and score the sub-segments those
//! frames delimit, keeps the best frames in a fixed-size memory, and lets the
//! model either answer or pick any unexplored segment (including coarse ones
//! from earlier rounds) to refine next.
//!
//! ```text
//!   select s* ──► uniform_sample ──► score_segments ──► frontier / history
//!       ▲                                                    │
//!       └──── Explore(id) ◄── decide ◄── update_memory ◄─────┘
//!                               │
//!                               └──► Answer
//! ```
//!
//! [`simenv`] provides synthetic videos with planted ground truth and a
//! deterministic oracle backend so the loop can be verified without a
//! vision-language model; [`harness`] runs datasets, sweeps and analyses.

pub mod analysis;
pub mod backend;
pub mod error;
pub mod explorer;
pub mod frames;
pub mod harness;
pub mod memory;
pub mod orchestrator;
pub mod prompt;
pub mod reward;
pub mod segment;
pub mod simenv;
pub mod trace;

pub use backend::{
    BackendConfig, ChatBackend, ChatMessage, Completion, Part, RemoteBackend, Role, Script,
    ScriptedBackend,
};
pub use error::{Error, Result};
pub use explorer::Decision;
pub use frames::{uniform_sample, ImagePayload, VideoHandle};
pub use memory::{EvictionPolicy, FrameRecord, MemoryBuffer};
pub use orchestrator::{run_episode, Agent, EpisodeConfig, Mode, Outcome};
pub use reward::{RewardHistory, RewardVerdict};
pub use segment::{
    split_segment, CandidateSet, RewardedSegment, Score, Segment, SegmentId, SegmentTree,
};
pub use simenv::{make_env, SimEnv, SimOracle, SyntheticSpec};
pub use trace::EpisodeTrace;
