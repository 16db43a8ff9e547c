use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("model format: {0}")]
    Format(String),

    #[error("clustering produced no clusters from {points} accumulated samples (all noise); accumulation insufficient")]
    AllNoise { points: usize },

    #[error("accumulation never completed: {seen} samples seen, threshold {threshold}")]
    AccumulationIncomplete { seen: usize, threshold: usize },

    #[error("invalid session state: {0}")]
    State(String),

    #[error("unknown cluster id {0}")]
    UnknownCluster(usize),

    #[error("class '{0}' has no training samples after the validation split")]
    EmptyClass(String),

    #[error("{0}")]
    Pipeline(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
