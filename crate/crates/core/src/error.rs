use std::path::PathBuf;

use thiserror::Error;

/// Failures from the watermarking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("oracle transport error: {0}")]
    OracleTransport(String),

    #[error("oracle protocol error: {0}")]
    OracleProtocol(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),

    #[error("malformed record: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Transport failures are the only ones worth retrying.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::OracleTransport(_))
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self, Error::OracleTransport(_) | Error::OracleProtocol(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
