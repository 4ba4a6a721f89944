use std::io;
use std::path::{Path, PathBuf};

use afd_core::Error as CoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum AfdError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{context}: {message}")]
    Format { context: String, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, AfdError>;

impl AfdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AfdError::Usage(_) => EXIT_USAGE,
            AfdError::Core(CoreError::NumericFailure { .. }) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        AfdError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        AfdError::Format {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AfdError::io(path, e))
}

/// Writes `bytes`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| AfdError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| AfdError::io(path, e))
}
