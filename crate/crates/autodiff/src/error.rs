use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite values produced by layer `{0}`")]
    NonFinite(String),
    #[error("input {height}x{width} is not divisible by {divisor} (depth needs 2^(depth-1))")]
    InputDims { height: usize, width: usize, divisor: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("grad check: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
