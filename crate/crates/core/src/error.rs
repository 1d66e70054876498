use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds limit {limit}")]
    Length { len: usize, limit: usize },

    #[error("cannot tokenize {text:?}: unknown word {word:?}")]
    Tokenization { text: String, word: String },

    #[error("cache integrity: {0}")]
    CacheIntegrity(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
