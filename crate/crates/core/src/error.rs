use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MagnetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MagnetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("truncated file {path}: expected {expected} payload bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in row {row} of {what}")]
    NonFinite { what: String, row: usize },

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("user {user} has interacted with every item; no negative can be sampled")]
    UnsatisfiableNegative { user: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MagnetError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MagnetError::Io {
            path: path.into(),
            source,
        }
    }
}
