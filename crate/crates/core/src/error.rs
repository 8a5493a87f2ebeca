use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid config: {}", .keys.join(", "))]
    Validation { keys: Vec<String> },

    #[error("data error: {0}")]
    Data(String),

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
