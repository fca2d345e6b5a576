use std::path::PathBuf;

use homotopy_da::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{failed} of {total} sweep cells failed numerically")]
    CellsFailed { failed: usize, total: usize },

    #[error("{failed} of {total} checks failed")]
    Validation { failed: usize, total: usize },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for configuration and IO problems, 2 for numerical failures,
    /// 3 for failed validation checks.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Io { .. } => 1,
            Self::Core(e) => match e {
                CoreError::NonFinite { .. }
                | CoreError::Singular { .. }
                | CoreError::NotPositiveDefinite(_)
                | CoreError::DegenerateWeights(_) => 2,
                CoreError::EmptyEnsemble
                | CoreError::TooFewParticles { .. }
                | CoreError::DimensionMismatch { .. }
                | CoreError::LengthMismatch { .. }
                | CoreError::UnknownScenario { .. }
                | CoreError::InvalidParameter(_) => 1,
            },
            Self::CellsFailed { .. } => 2,
            Self::Validation { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
