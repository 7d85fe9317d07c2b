//! Small helpers shared by the file formats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Reject JSON documents written by a newer major format.
pub fn check_format_version(json: &str) -> Result<()> {
    let value: serde_json::Value = serde_json::from_str(json)?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64);
    match found {
        Some(found) if found > u64::from(crate::FORMAT_VERSION) => Err(Error::FormatVersion {
            found: found.try_into().unwrap_or(u32::MAX),
            supported: crate::FORMAT_VERSION,
        }),
        _ => Ok(()),
    }
}
