use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("refusing to write into non-empty {0} (pass --force)")]
    Refused(String),

    #[error("smoke check failed: {0}")]
    Smoke(String),

    #[error(transparent)]
    Core(#[from] sotsep::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            other => other.to_string(),
        }
    }

    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Smoke(_) | CliError::Core(sotsep::Error::Numeric(_)) => 3,
            CliError::Refused(_) | CliError::Core(_) => 2,
        })
    }
}
