//! Error type shared across the crate.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T, E = DdError> = std::result::Result<T, E>;

/// Errors emitted by the library.
///
/// Validation problems (bad shapes, out-of-range arguments, malformed files)
/// are distinguished from numerical failures (non-finite values, divergence,
/// singular systems) so that callers such as the CLI can map them to
/// different exit codes.
#[derive(Debug, Error)]
pub enum DdError {
    /// Two operands cannot be combined because their shapes disagree.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An argument fell outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A gradient cache was produced by a different model state or batch.
    #[error("stale forward cache: {0}")]
    StaleCache(String),

    /// A non-finite value was detected where finite values are required.
    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: &'static str, detail: String },

    /// A numerical procedure failed (divergence, singular system,
    /// disconnected diffusion, aborted training).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A text file (CSV, checkpoint, config) could not be parsed.
    #[error("parse error in {path} (line {line}): {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl DdError {
    /// True for failures of the arithmetic itself rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, DdError::NonFinite { .. } | DdError::Numerical(_))
    }
}
