use std::io;

use thiserror::Error;

use crate::segment::SegmentId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("position {position} is not strictly inside segment [{start}, {end}) or positions are not increasing")]
    PositionOutOfRange { position: u64, start: u64, end: u64 },

    #[error("segment {0} is neither in the candidate set nor the root")]
    NotInFrontier(SegmentId),

    #[error("children do not partition segment {0}")]
    InvalidPartition(SegmentId),

    #[error("frame {index} is unavailable")]
    FrameUnavailable { index: u64 },

    #[error("decoder failed: {0}")]
    DecoderFailure(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("credentials rejected: {0}")]
    Auth(String),

    #[error("no script rule matches {class} request")]
    ScriptMiss { class: String },

    #[error("malformed reward response: {0}")]
    MalformedResponse(String),

    #[error("malformed decision: {0}")]
    MalformedDecision(String),

    #[error("segment {0} is not a selectable candidate")]
    UnknownSegment(SegmentId),

    #[error("exploration budget exhausted without an answer")]
    BudgetExhausted,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("round {round}: {source}")]
    AtRound {
        round: u32,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_round(self, round: u32) -> Self {
        match self {
            e @ Error::AtRound { .. } => e,
            e => Error::AtRound {
                round,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with round annotations stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtRound { source, .. } => source.root(),
            e => e,
        }
    }
}
