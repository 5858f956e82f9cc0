use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pedloc::Error),

    #[error("{origin}: {message}")]
    Config { origin: String, message: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{failed} of {total} acceptance checks failed")]
    CheckFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_validation() => EXIT_VALIDATION,
            CliError::Config { .. } | CliError::Invalid(_) => EXIT_VALIDATION,
            CliError::CheckFailed { .. } => EXIT_CHECK_FAILED,
            _ => EXIT_FAILURE,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Core(pedloc::Error::InvalidDistance(-1.0)).exit_code(), 2);
        assert_eq!(CliError::Invalid("x".into()).exit_code(), 2);
        assert_eq!(CliError::CheckFailed { failed: 1, total: 4 }.exit_code(), 3);
        let io = std::io::Error::other("disk");
        assert_eq!(CliError::Io { path: "a".into(), source: io }.exit_code(), 1);
    }
}
