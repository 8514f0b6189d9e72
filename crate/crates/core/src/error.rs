use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("training error in parameter `{name}`: {reason}")]
    Training { name: String, reason: String },

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
