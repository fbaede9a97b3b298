//! CLI-side errors and their process exit codes.

use lorakit_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] CoreError),
    /// Malformed or incompatible checkpoint/config files.
    #[error("format error: {0}")]
    Format(String),
    /// The benchmark's merged-update latency bound was violated.
    #[error("benchmark bound violated: {0}")]
    BenchBound(String),
}

impl CliError {
    /// Exit codes: 2 for configuration problems, 3 for numeric/runtime
    /// failures, 4 for benchmark bound violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(CoreError::Config(_)) | CliError::Format(_) => 2,
            CliError::BenchBound(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
