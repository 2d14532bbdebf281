use qsync_core::correlator::CorrelatorError;
use qsync_core::protocol::ProtocolError;
use qsync_core::timetag::StreamIoError;
use qsync_core::{ConfigError, SimulationError};
use thiserror::Error;

/// Command failure, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Decode(String),
    #[error("{0}")]
    NoPeak(String),
    #[error("{0}")]
    Fit(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Decode(_) => 4,
            CliError::NoPeak(_) => 5,
            CliError::Fit(_) => 6,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<StreamIoError> for CliError {
    fn from(e: StreamIoError) -> Self {
        match e {
            StreamIoError::Io { .. } => CliError::Io(e.to_string()),
            StreamIoError::Decode { .. } => CliError::Decode(e.to_string()),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CorrelatorError> for CliError {
    fn from(e: CorrelatorError) -> Self {
        let msg = e.to_string();
        match e {
            CorrelatorError::NoPeak => CliError::NoPeak(msg),
            CorrelatorError::Fit { .. } | CorrelatorError::Model(_) => CliError::Fit(msg),
            CorrelatorError::Binning(_) | CorrelatorError::BinningMismatch => CliError::Usage(msg),
            CorrelatorError::Unsorted { .. } => CliError::Decode(msg),
            CorrelatorError::Coverage { .. } | CorrelatorError::Overflow => CliError::Validation(msg),
            CorrelatorError::Csv(_) => CliError::Io(msg),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Usage(_) => CliError::Usage(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}
