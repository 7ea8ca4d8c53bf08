//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value left the domain of an operation (log of non-positive,
    /// division by zero, overflow to non-finite).
    #[error("numeric domain violation: {0}")]
    Domain(String),

    /// An API contract was broken (non-scalar loss, more ground-truth
    /// objects than queries, duplicate parameter name).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed caller input (out-of-vocabulary token, empty span,
    /// span outside the caption).
    #[error("invalid input: {0}")]
    Input(String),

    /// Configuration failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// A serialized artifact (dataset, checkpoint, vocabulary) could not
    /// be parsed or does not match the active config.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
