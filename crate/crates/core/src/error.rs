use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HillError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HillError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{kind} id {id} out of range (len {len})")]
    IndexOutOfRange { kind: &'static str, id: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no negatives available for user {user}")]
    NoNegatives { user: u32 },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("codebook for level {level} is not finalized")]
    Unfinalized { level: usize },

    #[error("bad container: {0}")]
    Format(String),

    #[error("{0}")]
    Empty(String),
}

impl HillError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HillError::Io { path: path.into(), source }
    }

    pub fn config(message: impl Into<String>) -> Self {
        HillError::InvalidConfig(vec![message.into()])
    }
}
