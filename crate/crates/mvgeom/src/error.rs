//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MvError {
    /// Mathematical precondition violated (non-positive depth, shape
    /// mismatch, non-rotation matrix, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed on-disk data (bad FGRID header, truncated payload,
    /// non-finite values, unparseable trajectory line, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid run configuration (out-of-range anchor index, unknown
    /// denoiser name, missing required key, ...).
    #[error("config error: {0}")]
    Config(String),

    #[error("depth provider failure: {0}")]
    DepthProvider(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MvError>;

impl MvError {
    pub fn domain(msg: impl Into<String>) -> Self {
        MvError::Domain(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        MvError::Format(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        MvError::Config(msg.into())
    }
}
