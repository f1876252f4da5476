use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/mask dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A parameter is outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// A serialized artifact (RLE, PPM, tensor file, manifest) is malformed.
    #[error("format error: {0}")]
    Format(String),
    /// An operation contract was violated (non-scalar loss, empty report, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
