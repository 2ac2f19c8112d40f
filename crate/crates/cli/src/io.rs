use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::CliError;

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::missing(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
