use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] alm_core::Error),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for failures at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(alm_core::Error::Config(_) | alm_core::Error::InvalidArgument(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
