//! Operational shell around `eed-core`: configuration files, dataset
//! ingestion, the staged experiment pipeline, and metrics/report emission.
//!
//! The `eed` binary is a thin dispatcher over [`pipeline`]; everything it can
//! do is also callable as a library, which is how the integration tests
//! drive full experiments without spawning processes.

pub mod config;
pub mod data;
pub mod metrics;
pub mod pipeline;

/// Failures are split by exit code: configuration problems (exit 2) versus
/// stage execution problems (exit 3). Stage errors keep the stage name so a
/// failed `run-all` says where it died; partial outputs stay on disk.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {message}")]
    Stage { stage: String, message: String },
}

impl HarnessError {
    pub fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        HarnessError::Stage {
            stage: stage.to_string(),
            message: err.to_string(),
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Stage { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
