use thiserror::Error;

pub type Result<T> = std::result::Result<T, MapexError>;

#[derive(Debug, Error)]
pub enum MapexError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate mask: mask selects no elements")]
    DegenerateMask,

    #[error("degenerate channel {channel}: standard deviation is zero")]
    DegenerateChannel { channel: usize },

    #[error("config error ({key}): {message}")]
    Config { key: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("modality {0} is not available in this model")]
    ModalityUnavailable(usize),

    #[error("prune spec error: {0}")]
    Spec(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MapexError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        MapexError::Config { key: key.into(), message: message.into() }
    }

    pub(crate) fn dim(message: impl Into<String>) -> Self {
        MapexError::Dimension(message.into())
    }
}
