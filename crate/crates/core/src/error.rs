use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid votes: {0}")]
    InvalidVotes(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward already ran on this graph; record a new forward pass first")]
    BackwardTwice,

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown configuration key(s): {}", .0.join(", "))]
    UnknownConfigKeys(Vec<String>),

    #[error("configuration error for `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("integrity error for sample `{sample_id}`: {msg}")]
    Integrity { sample_id: String, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("numerical failure: {0}")]
    Numerical(String),

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
