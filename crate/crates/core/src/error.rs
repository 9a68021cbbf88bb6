use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("gain synthesis failed at k={k}: {reason}")]
    Synthesis { k: usize, reason: String },

    #[error("index {index} out of range ({range})")]
    Index { index: i64, range: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("k + tau = {at} exceeds horizon {horizon}")]
    Horizon { at: usize, horizon: usize },

    #[error("trial {trial} failed at k={k}: {reason}")]
    TrialFailure { trial: u64, k: usize, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
