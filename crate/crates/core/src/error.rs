use maco_autodiff::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {channels} output channels")]
    LabelOutOfRange { label: u8, channels: usize },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("grid file: {0}")]
    Format(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
