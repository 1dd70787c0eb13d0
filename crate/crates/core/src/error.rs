use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the training, inference and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("empty loss: every position is masked")]
    EmptyLoss,

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("teacher request failed: {0}")]
    Teacher(String),

    /// The host cannot run the requested work at all (missing tool, unwritable
    /// scratch root). Distinct from per-candidate failures.
    #[error("environment error: {0}")]
    Environment(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors that invalidate a whole run rather than a single item.
    pub fn is_environment(&self) -> bool {
        matches!(self, Error::Environment(_) | Error::Io { .. })
    }
}
