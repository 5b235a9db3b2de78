use std::path::{Path, PathBuf};

use geomformer_core::Error as CoreError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Errors of the driver layer, each tied to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("audit failed: {0}")]
    Audit(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 ok, 1 config/format, 2 I/O, 3 numeric failure, 4 audit failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Format(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Audit(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Numeric(_) | CoreError::NonFiniteGradient(_) => CliError::Numeric(e.to_string()),
            CoreError::Format(m) => CliError::Format(m),
            other => CliError::Config(other.to_string()),
        }
    }
}
