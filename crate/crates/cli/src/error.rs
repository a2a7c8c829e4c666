use std::path::PathBuf;

use transdod_core::Error as CoreError;

/// Process exit status.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: serde_json::Error },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::Task { .. }
                | CoreError::Incompatible(_)
                | CoreError::Schedule(_)
                | CoreError::Json(_) => EXIT_USAGE,
                CoreError::Io { .. } | CoreError::Format { .. } => EXIT_IO,
                _ => EXIT_VERIFY,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
