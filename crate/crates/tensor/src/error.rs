use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// Shapes do not conform for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// The tape or a parameter was used outside its contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// A forward or backward pass produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension(msg.into()))
}
