use std::path::PathBuf;

use crate::store_io::TpvfError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("incomparable initializations: {left:016x} vs {right:016x}")]
    IncomparableInit { left: u64, right: u64 },
    #[error("degenerate prompt: pooled vector is zero")]
    DegeneratePrompt,
    #[error("task mismatch: {left} vs {right}")]
    TaskMismatch { left: String, right: String },
    #[error("duplicate task id {0}")]
    DuplicateTask(String),
    #[error("empty subset")]
    EmptySubset,
    #[error("source index {index} out of range for {n} sources")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("duplicate source index {0} in subset")]
    DuplicateIndex(usize),
    #[error("exact solver size limit: {n} sources exceeds {limit}")]
    ExactSizeLimit { n: usize, limit: usize },
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {got}, expected {expected}")]
    SequenceLength { got: usize, expected: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("vocabulary too small: need {needed} tokens, have {vocab}")]
    VocabularyTooSmall { needed: usize, vocab: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tpvf(#[from] TpvfError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
