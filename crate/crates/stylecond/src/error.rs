//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input sequence shorter than the extractor window or excerpt bounds.
    #[error("input too short: {0}")]
    TooShort(String),

    /// An embedding collapsed to (numerically) zero and cannot be normalized.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// Non-finite values or a numerically invalid matrix were encountered.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Stored data references indices or shapes that do not exist.
    #[error("corrupt data: {0}")]
    Corruption(String),

    /// A persisted file declares a different format version than this build.
    #[error("version mismatch: file has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    /// A persisted file ended before its declared payload length.
    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    /// Two artifacts (store/checkpoint/corpus) were built with incompatible settings.
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
