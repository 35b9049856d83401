use std::path::{Path, PathBuf};

/// Errors of the IO layer; wraps the core pipeline errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] drgan_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("sample {id}: {message}")]
    Ingestion { id: String, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(drgan_core::Error::Numeric(_)) => exit::NUMERIC,
            Error::Core(drgan_core::Error::Config(_) | drgan_core::Error::Validation(_)) => exit::VALIDATION,
            Error::Ingestion { .. } | Error::Usage(_) | Error::Format { .. } => exit::VALIDATION,
            _ => exit::FAILURE,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub(crate) fn format_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Format { path: path.to_path_buf(), message: message.to_string() }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}
