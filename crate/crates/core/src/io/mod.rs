//! On-disk formats: binary blobs, PNM rasters, scene archives and JSON
//! documents.

pub mod archive;
pub mod blob;
pub mod pnm;

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}: format version {found}, this build reads version {expected}")]
    FormatVersionMismatch { file: PathBuf, found: u32, expected: u32 },
    #[error("{file}: invalid `{field}`: {message}")]
    InvariantViolation { file: PathBuf, field: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl IoError {
    pub fn invariant(file: &Path, field: &str, message: String) -> Self {
        IoError::InvariantViolation { file: file.to_path_buf(), field: field.to_string(), message }
    }

    pub fn from_io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            IoError::MissingFile(path.to_path_buf())
        } else {
            IoError::Io { path: path.to_path_buf(), source: e }
        }
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e })
}

/// Canonical JSON text: two-space indent, trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_bytes(path, to_json_string(value).as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::from_io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Json { path: path.to_path_buf(), source: e })
}
