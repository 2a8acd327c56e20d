//! Error taxonomy shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Inconsistent dimensions, invalid architecture or experiment settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data handed to an operation (bad labels, empty vehicles, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Violation of the federation exchange contract (e.g. missing branch on merge).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed dataset / manifest / checkpoint contents.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("diverged at round {round}: {detail}")]
    Diverged { round: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
