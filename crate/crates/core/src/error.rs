use rpstn_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// Invalid sample or annotation content.
    #[error("data error: {0}")]
    Data(String),
    /// Malformed PSEQ1 or checkpoint bytes.
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    /// Checkpoint and data or config disagree on a shape.
    #[error("shape error: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
