use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward: {0}")]
    Backward(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::InvalidArgument(msg.into()))
}
