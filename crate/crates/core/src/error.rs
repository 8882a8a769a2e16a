use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied data that violates an operation's preconditions.
    #[error("invalid input: {0}")]
    Input(String),

    /// A configuration value is out of range or inconsistent with the model.
    #[error("invalid config: {0}")]
    Config(String),

    /// Non-finite activations or losses.
    #[error("numeric failure at layer {layer}: {msg}")]
    Numeric { layer: usize, msg: String },

    /// An API was driven in the wrong order (e.g. observing after an exit fired).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
