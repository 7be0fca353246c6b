use std::path::{Path, PathBuf};

use flipflop_core::datagen::DataError;
use flipflop_core::model::ModelError;
use flipflop_core::probes::ProbeError;
use flipflop_core::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("dataset missing: {0} (run `generate` first)")]
    MissingData(PathBuf),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(DataError::Io { .. }) => 5,
            CliError::Data(_) | CliError::MissingData(_) => 3,
            CliError::Train(TrainError::Io { .. }) => 5,
            CliError::Train(TrainError::Config(_)) => 2,
            CliError::Train(_) => 4,
            CliError::Model(ModelError::Checkpoint { .. }) | CliError::MissingCheckpoint(_) => 6,
            CliError::Model(_) | CliError::Probe(_) => 7,
            CliError::Io { .. } => 5,
        }
    }
}
