//! Exit codes and the machine-readable error record.

use std::io;
use std::path::Path;

use magnet::MagnetError;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("run aborted: {0}")]
    Runtime(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("gradient check failed for {0}")]
    GradCheck(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::MissingInput(_) => 4,
            CliError::Data(_) => 5,
            CliError::Runtime(_) => 6,
            CliError::Checkpoint(_) => 7,
            CliError::GradCheck(_) => 8,
            CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing-input",
            CliError::Data(_) => "data",
            CliError::Runtime(_) => "runtime",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::GradCheck(_) => "gradcheck",
            CliError::Other(_) => "other",
        }
    }

    pub fn record(&self) -> serde_json::Value {
        json!({ "error": self.kind(), "code": self.code(), "message": self.to_string() })
    }

    pub fn missing(path: &Path, e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            CliError::MissingInput(path.display().to_string())
        } else {
            CliError::Other(format!("{}: {e}", path.display()))
        }
    }
}

impl From<MagnetError> for CliError {
    fn from(e: MagnetError) -> Self {
        let msg = e.to_string();
        match e {
            MagnetError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => CliError::MissingInput(msg),
            MagnetError::Io { .. } => CliError::Other(msg),
            MagnetError::Parameter(_) => CliError::Config(msg),
            MagnetError::NonFiniteLoss { .. } => CliError::Runtime(msg),
            MagnetError::Checkpoint(_) => CliError::Checkpoint(msg),
            MagnetError::Parse { .. }
            | MagnetError::EmptyDataset
            | MagnetError::Shape(_)
            | MagnetError::Truncated { .. }
            | MagnetError::NonFinite { .. }
            | MagnetError::BadMagic(_)
            | MagnetError::UnsatisfiableNegative { .. }
            | MagnetError::Empty(_)
            | MagnetError::Json(_) => CliError::Data(msg),
        }
    }
}
