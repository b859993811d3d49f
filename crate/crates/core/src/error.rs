//! Error taxonomy shared across the crate.
//!
//! Variants map onto the CLI exit codes: configuration errors exit 2, data
//! and domain errors exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values or an unparseable config file.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was asked to act on inputs outside its domain
    /// (empty scene, cell out of range, malformed token sequence, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Missing or malformed on-disk artifacts, including run-directory
    /// collisions.
    #[error("data error: {0}")]
    Data(String),

    /// A statistic was requested on a sample too small or too degenerate
    /// to support it.
    #[error("statistical error: {0}")]
    Stats(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn stats(msg: impl Into<String>) -> Self {
        Error::Stats(msg.into())
    }
}
