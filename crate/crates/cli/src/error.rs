use plin_core::dataset::DatasetError;
use plin_core::nn::{CheckpointError, TrainError};
use thiserror::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::data(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::data(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
