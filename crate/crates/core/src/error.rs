use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("numerical abort at step {step}: {reason}")]
    Numerical {
        step: u64,
        reason: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("checkpoint was written for config {found}, refusing to resume config {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("embedding table is not injective: entries {first} and {second} collide")]
    NotInjective { first: usize, second: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
