use deoccl_core::dataset::DatasetError;
use deoccl_core::imaging::ImagingError;
use deoccl_core::metrics::MetricsError;
use deoccl_core::network::NetworkError;
use deoccl_core::training::TrainingError;
use thiserror::Error;

/// Command failures bucketed by exit code: usage/config problems exit 1,
/// data problems 2, runtime and numeric problems 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl From<ImagingError> for CliError {
    fn from(e: ImagingError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::NonFinite { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Plugin { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::NonPositiveRate(_)
            | TrainingError::ZeroBatch
            | TrainingError::EmptySchedule
            | TrainingError::StageOrder { .. }
            | TrainingError::BadStage { .. }
            | TrainingError::BadScale(_) => CliError::Usage(e.to_string()),
            TrainingError::Dataset(d) => CliError::Data(d.to_string()),
            TrainingError::Io { .. }
            | TrainingError::BadCheckpoint { .. }
            | TrainingError::CheckpointVersion { .. }
            | TrainingError::CheckpointConfig { .. }
            | TrainingError::EmptyCorpus
            | TrainingError::WrongPhase { .. }
            | TrainingError::ScheduleDone => CliError::Data(e.to_string()),
            TrainingError::Network(n) => CliError::from(n),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
