use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QfdaError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bytes on disk do not follow the expected layout (magic numbers,
    /// headers, truncated payloads).
    #[error("format error: {0}")]
    Format(String),

    /// Inputs disagree with each other (counts, dimensions, labels).
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("index {index} out of range (max {max})")]
    Index { index: usize, max: usize },

    #[error("value error: {0}")]
    Value(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("optimization error: {0}")]
    Optimization(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = QfdaError> = std::result::Result<T, E>;

impl QfdaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QfdaError::Io {
            path: path.into(),
            source,
        }
    }
}
