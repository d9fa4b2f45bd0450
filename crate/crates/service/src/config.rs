//! Service limits and storage locations, read from a TOML file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Largest dataset a session may hold.
    pub max_points: usize,
    /// Sessions kept at once.
    pub max_sessions: usize,
    /// Where session records and event logs are persisted; in-memory only when unset.
    pub data_dir: Option<PathBuf>,
    /// Directory that `{"path": ...}` dataset references resolve against.
    /// Path references are refused when unset.
    pub dataset_root: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_points: 200_000,
            max_sessions: 64,
            data_dir: None,
            dataset_root: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}
