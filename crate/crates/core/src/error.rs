use std::path::PathBuf;

use dst_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, DstError>;

#[derive(Debug, Error)]
pub enum DstError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed record in dialogue {dialogue_id:?}{}: {reason}", turn_index.map(|t| format!(" turn {t}")).unwrap_or_default())]
    Malformed {
        dialogue_id: String,
        turn_index: Option<usize>,
        reason: String,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("turn index {turn} out of range for a dialogue of {len} turns")]
    TurnOutOfRange { turn: usize, len: usize },
    #[error("context length must be non-negative, got {0}")]
    NegativeLength(i64),
    #[error("value vocabulary of {available} tokens cannot cover {needed} slots")]
    VocabTooSmall { needed: usize, available: usize },
    #[error("vector file line {line}: expected {expected} values, found {found}")]
    VectorDimension { line: usize, expected: usize, found: usize },
    #[error("alpha must be non-negative, got {0}")]
    NegativeAlpha(f64),
    #[error("unknown slot {0}")]
    UnknownSlot(String),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
}

impl DstError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DstError::Io {
            path: path.into(),
            source,
        }
    }
}
