use std::path::PathBuf;

use dpgne::error::Error as ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

impl ExperimentError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for bad input, 3 for numerical failure, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } | Self::Csv(_) => 4,
            Self::Model(e) => match e {
                ModelError::NoConvergence { .. }
                | ModelError::NumericalFailure { .. }
                | ModelError::TailToleranceUnreachable { .. }
                | ModelError::GenerationFailed { .. } => 3,
                ModelError::OutOfOrderAccumulation { .. } => 3,
                _ => 2,
            },
        }
    }
}
