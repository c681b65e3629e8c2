use hcp_core::HcpError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] HcpError),
}

impl CliError {
    /// 0 success, 2 usage or validation, 3 compatibility, 4 numerical,
    /// 1 for internal invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                HcpError::Compatibility(_) => 3,
                HcpError::Numerical(_) => 4,
                HcpError::State(_) | HcpError::FreezeViolation(_) | HcpError::Contract(_) => 1,
                _ => 2,
            },
        }
    }
}
