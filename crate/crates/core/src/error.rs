use thiserror::Error;

use crate::kv::SeqId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence {seq:?} has no contiguous context ending at position {pos}")]
    NonConsecutiveContext { seq: SeqId, pos: usize },

    #[error("position {pos} is already occupied in sequence {seq:?}")]
    Overlap { seq: SeqId, pos: usize },

    #[error("position out of range: {0}")]
    Range(String),

    #[error("KV cell pool exhausted ({capacity} cells)")]
    Capacity { capacity: usize },

    #[error("no free sequence ids")]
    SequencesExhausted,

    #[error("unknown sequence {0:?}")]
    UnknownSequence(SeqId),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("token {token} out of vocabulary (size {vocab})")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("non-finite logits at position {0}")]
    NonFinite(usize),

    #[error("unknown style tag {0:?}")]
    UnknownStyle(String),

    #[error("record {0} not found")]
    NotFound(u64),

    #[error("session {0:?} is not active")]
    NoSession(String),

    #[error("background worker is gone")]
    WorkerGone,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
