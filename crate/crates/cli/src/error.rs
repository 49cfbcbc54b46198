use lapcomplete::checkpoint::CheckpointError;
use lapcomplete::config::ConfigError;
use lapcomplete::datagen::DataError;
use lapcomplete::eval::EvalError;
use lapcomplete::gen_net::NetError;
use lapcomplete::lsq::LsqError;
use lapcomplete::train::TrainError;

/// Exit codes: 1 usage, 2 numeric failure, 3 I/O.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::UnknownKind(_)
            | DataError::UnknownSplit(_)
            | DataError::Count(_)
            | DataError::KeepFraction(_)
            | DataError::ViewDirection(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::TooFewPoints(_) | NetError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Net(n) => n.into(),
            EvalError::Geometry(_) => CliError::Numeric(e.to_string()),
            EvalError::EmptySplit | EvalError::NoRuns => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Net(n) => n.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::EmptyTrainSplit | TrainError::EmptyValSplit | TrainError::Config(_) => {
                CliError::Usage(e.to_string())
            }
            TrainError::NonFinite { .. } | TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<LsqError> for CliError {
    fn from(e: LsqError) -> Self {
        match e {
            LsqError::RankDeficient { .. } | LsqError::Geometry(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}
