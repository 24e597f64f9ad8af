use maco_autodiff::NnError;
use maco_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::Io(_) => 3,
            HarnessError::Numerical(_) => 4,
        }
    }
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Param(_) => HarnessError::Config(e.to_string()),
            CoreError::NonFinite(_) => HarnessError::Numerical(e.to_string()),
            CoreError::Nn(NnError::NonFinite(_)) => HarnessError::Numerical(e.to_string()),
            CoreError::Nn(NnError::Config(_)) => HarnessError::Config(e.to_string()),
            CoreError::Io(io) => HarnessError::Io(io),
            _ => HarnessError::Data(e.to_string()),
        }
    }
}

impl From<NnError> for HarnessError {
    fn from(e: NnError) -> Self {
        CoreError::from(e).into()
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Config(e.to_string())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
