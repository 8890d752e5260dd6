use std::path::PathBuf;

use tag_core::TagError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}:{column}: {message}")]
    ConfigSyntax {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("{0}: no such file")]
    MissingInput(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("artifact check failed: {0}")]
    Manifest(String),

    #[error("{0} property violation(s) found")]
    PropertyViolation(usize),

    #[error(transparent)]
    Core(#[from] TagError),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return CliError::MissingInput(path);
        }
        CliError::Io { path, source }
    }

    /// 1: validation, 2: runtime, 3: property violation.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ConfigSyntax { .. } | CliError::Invalid { .. } | CliError::MissingInput(_) => 1,
            CliError::PropertyViolation(_) => 3,
            CliError::Io { .. } | CliError::Manifest(_) => 2,
            CliError::Core(e) => match e {
                TagError::InvalidParameter { .. }
                | TagError::InvalidPartition(_)
                | TagError::Parse(_)
                | TagError::DimensionMismatch { .. }
                | TagError::UnknownTask(_)
                | TagError::SparseColumn { .. } => 1,
                _ => 2,
            },
        }
    }
}
