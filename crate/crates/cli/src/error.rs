use std::path::PathBuf;

use thiserror::Error;
use vmfcal::VmfError;

/// Process exit statuses.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] VmfError),

    #[error("verification failed: {0}")]
    Verification(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => EXIT_CONFIG,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_CONFIG,
            CliError::Verification(_) => EXIT_VERIFICATION,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_kind() {
        let numerical = CliError::Core(VmfError::Numerical {
            context: "test",
            detail: "nan".into(),
        });
        assert_eq!(numerical.exit_code(), EXIT_NUMERICAL);
        assert_eq!(CliError::Core(VmfError::Domain("x".into())).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::config("x").exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::Verification("x".into()).exit_code(), EXIT_VERIFICATION);
        assert_ne!(EXIT_OK, EXIT_CONFIG);
    }
}
