use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token {token:?} is not in the vocabulary")]
    UnknownToken { token: String },

    #[error("token id {id} is out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("{path}: line {line}: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("record {index}: stored {which} mask disagrees with recomputed diff (expected {expected:?})")]
    MaskMismatch {
        index: usize,
        which: &'static str,
        expected: Vec<u8>,
    },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("sequence of length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("model configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("could not analyze {path}: {reason}")]
    Analysis { path: String, reason: String },

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
