use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VmfError>;

#[derive(Debug, Error)]
pub enum VmfError {
    /// An input lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An iterative or floating-point procedure failed.
    #[error("numerical error in {context}: {detail}")]
    Numerical { context: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },
}

impl VmfError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        VmfError::Domain(msg.into())
    }

    pub(crate) fn numerical(context: &'static str, detail: impl Into<String>) -> Self {
        VmfError::Numerical {
            context,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VmfError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, detail: impl Into<String>) -> Self {
        VmfError::Parse {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, VmfError::Numerical { .. })
    }
}
