//! `apda` command-line runner: dataset generation, training, evaluation and
//! diagnostic exports, all driven by one JSON experiment config.

pub mod commands;
pub mod config;
pub mod report;

use std::path::Path;

use apda::data::DataError;
use apda::networks::NetworkError;
use apda::trainer::TrainError;

pub use commands::{run, Cli};
pub use config::{DatasetSource, ExperimentConfig, ReportConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config, flags or input files; exit status 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while doing the work; exit status 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Spec(_) | NetworkError::Checkpoint { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Validation(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Network(n) => n.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
