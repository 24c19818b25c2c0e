use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] wgf_core::Error),

    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("config: {0}")]
    Parse(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{failed} of {total} criteria failed")]
    CheckFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        CliError::Invalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for rejected input, 3 for numerical blow-up, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(wgf_core::Error::Io(_)) => 1,
            CliError::Core(_) | CliError::Invalid { .. } | CliError::Parse(_) => 2,
            CliError::Io { .. } | CliError::CheckFailed { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
