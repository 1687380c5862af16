//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DiarError>;

#[derive(Debug, Error)]
pub enum DiarError {
    /// Caller violated a precondition (bad shape, bad config, bad flag).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Non-finite values or numerically unusable inputs.
    #[error("numeric error: {0}")]
    NumericError(String),

    /// More speakers than the configured maximum.
    #[error("capacity exceeded: {actual} speakers, capacity {capacity}")]
    CapacityExceeded { actual: usize, capacity: usize },

    /// Stream API misuse (out-of-order push, push after flush).
    #[error("protocol error: {0}")]
    ProtocolError(String),

    /// Malformed on-disk artifact (feature file, checkpoint, RTTM, manifest).
    #[error("format error: {0}")]
    FormatError(String),

    /// Training diverged (non-finite loss); carries diagnostics.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DiarError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DiarError::InvalidArgument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        DiarError::NumericError(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        DiarError::FormatError(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        DiarError::ProtocolError(msg.into())
    }
}
