//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by model construction, inference, planning, and the
/// experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Linear-algebra failure that survived jitter escalation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code mapping used by the CLI: 1 for configuration
    /// problems, 2 for numerical failures encountered mid-run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Io { .. } => 1,
            Error::Numerical(_) | Error::InvalidState(_) | Error::DimensionMismatch { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
