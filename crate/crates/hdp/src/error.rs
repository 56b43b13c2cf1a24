use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum HdpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("corrupt file: {0}")]
    CorruptFile(String),
}

pub type Result<T> = std::result::Result<T, HdpError>;
