//! Error type shared by every module of the crate.

use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, UpqError>;

#[derive(Debug, thiserror::Error)]
pub enum UpqError {
    /// A caller broke an operation's precondition (shapes, ranges, arity).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A weight row that cannot define a quantization step.
    #[error("degenerate row {row}: {reason}")]
    DegenerateRow { row: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed checkpoint or dataset container.
    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Optimization produced a non-finite loss.
    #[error("optimization diverged at step {step}: {trace}")]
    Divergence { step: usize, trace: String },

    /// Failure inside the calibration of one transformer block.
    #[error("block {block}: {source}")]
    Block {
        block: usize,
        #[source]
        source: Box<UpqError>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl UpqError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        UpqError::Contract(msg.into())
    }
}
