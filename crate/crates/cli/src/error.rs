//! Command errors and their exit codes.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::scenario::ScenarioError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Core(#[from] tollgate_core::Error),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("missing artifact {path}")]
    MissingArtifact { path: PathBuf },
    #[error("{path}: malformed artifact: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Scenario errors keep their own codes; 1 is reserved for failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Scenario(e) => e.exit_code(),
            Self::Io { .. } => 6,
            Self::Core(_) => 7,
            Self::MissingArtifact { .. } | Self::Artifact { .. } => 8,
        }
    }

    pub(crate) fn io(path: &Path, err: impl ToString) -> Self {
        Self::Io { path: path.to_path_buf(), message: err.to_string() }
    }

    pub(crate) fn artifact(path: &Path, err: impl ToString) -> Self {
        Self::Artifact { path: path.to_path_buf(), message: err.to_string() }
    }
}
