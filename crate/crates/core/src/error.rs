use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value showed up in a kernel operation.
    #[error("numeric error in {component} (op #{op}): {detail}")]
    Numeric {
        component: String,
        op: usize,
        detail: String,
    },

    #[error("format error in {}: byte offset {offset}: {detail}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error families, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Internal,
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(component: impl Into<String>, op: usize, detail: impl Into<String>) -> Self {
        Error::Numeric {
            component: component.into(),
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Relabel a numeric error with the loss component it came from.
    pub fn in_component(self, component: &str) -> Self {
        match self {
            Error::Numeric { op, detail, .. } => Error::Numeric {
                component: component.to_string(),
                op,
                detail,
            },
            other => other,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Format { .. } | Error::Validation(_) | Error::Schema { .. } | Error::Io { .. } => {
                ErrorCategory::Data
            }
            Error::Numeric { .. } => ErrorCategory::Numeric,
            Error::Contract(_) => ErrorCategory::Internal,
        }
    }
}
