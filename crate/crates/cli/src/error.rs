use lulc_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or a missing upstream artifact.
    #[error("{0}")]
    Precondition(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Precondition(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    pub fn other(e: impl Into<anyhow::Error>) -> Self {
        CliError::Other(e.into())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::EmptyData | TrainError::MissingLabels(_) | TrainError::Config(_) => {
                CliError::Precondition(e.to_string())
            }
            other => CliError::Other(other.into()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
