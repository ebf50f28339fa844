use std::path::PathBuf;

use thiserror::Error;
use xdseg::data::DataError;
use xdseg::metrics::MetricError;
use xdseg::network::NetworkError;
use xdseg::training::TrainError;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Training hit a non-finite loss.
    #[error("{0}")]
    Aborted(TrainError),
    /// The inputs violate a command's contract: bad configuration,
    /// mismatched extents or channel counts, and similar.
    #[error("{0}")]
    Contract(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Aborted(_) => 1,
            CliError::Contract(_) => 2,
            CliError::Io { .. } => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        CliError::Contract(msg.into())
    }

    /// Classifies a volume or manifest error raised while reading `path`.
    pub(crate) fn data(path: impl Into<PathBuf>, err: DataError) -> Self {
        match err {
            DataError::Io(_)
            | DataError::BadMagic
            | DataError::Truncated(_)
            | DataError::SizeMismatch { .. }
            | DataError::Header(_) => CliError::io(path, err),
            DataError::InvalidVolume(_) | DataError::InvalidArgument(_) | DataError::Manifest(_) => {
                CliError::Contract(format!("{}: {err}", path.into().display()))
            }
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, err: NetworkError) -> Self {
        match err {
            NetworkError::Io(_) => CliError::io(path, err),
            other => CliError::Contract(format!("{}: {other}", path.into().display())),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::NonFinite { .. } => CliError::Aborted(err),
            other => CliError::Contract(other.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(err: NetworkError) -> Self {
        CliError::Contract(err.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(err: MetricError) -> Self {
        CliError::Contract(err.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(err: DataError) -> Self {
        CliError::Contract(err.to_string())
    }
}

impl From<xdseg::tensor::TensorError> for CliError {
    fn from(err: xdseg::tensor::TensorError) -> Self {
        CliError::Contract(err.to_string())
    }
}
