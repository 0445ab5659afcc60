use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("LFSR state must be non-zero")]
    ZeroLfsrState,

    #[error("LFSR taps {taps:#x} are not maximal for width {width} (period {period})")]
    NonMaximalLfsr { width: u32, taps: u32, period: u64 },

    #[error("{what}: expected {expected} bytes, found {actual} (at byte offset {offset})")]
    Truncated {
        what: String,
        expected: u64,
        actual: u64,
        offset: u64,
    },

    #[error("{what}: bad magic {found:#010x} at byte offset 0")]
    BadMagic { what: String, found: u32 },

    #[error("multiplier table: {detail} at entry {entry}")]
    MultTable { entry: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("error model for layer {layer} was never calibrated")]
    Uncalibrated { layer: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by user input (bad files, bad config) rather
    /// than internal invariant violations.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Invariant(_) | Error::NonFinite(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
