use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed event stream: {0}")]
    Stream(String),

    #[error("invalid behavior spec: {0}")]
    InvalidSpec(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
