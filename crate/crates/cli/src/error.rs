use daf_core::DafError;
use thiserror::Error;

/// Runtime failures of a command; all map to exit code 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] DafError),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("{failed} of {total} inputs failed")]
    Partial { failed: usize, total: usize },
    #[error("{0}")]
    Usage(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// Process exit code under the 0 / 1 / 2 contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
