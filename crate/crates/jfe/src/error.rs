use std::path::PathBuf;

use jfe_core::ErrorKind;

/// Errors of the file formats and the command line.
#[derive(Debug, thiserror::Error)]
pub enum JfeError {
    #[error(transparent)]
    Core(#[from] jfe_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Format(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
}

pub type Result<T, E = JfeError> = std::result::Result<T, E>;

impl JfeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        JfeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numeric failure,
    /// 5 version mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            JfeError::Config(_) => 2,
            JfeError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            },
            JfeError::Version { .. } => 5,
            JfeError::Io { .. }
            | JfeError::Record { .. }
            | JfeError::Format(_)
            | JfeError::Truncated(_)
            | JfeError::Checksum { .. } => 3,
        }
    }

    /// Short machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            4 => "numeric",
            5 => "version",
            _ => "data",
        }
    }
}
