//! Optional tool configuration file.
//!
//! Supplies defaults for the archive layout so operators do not repeat
//! paths on every invocation; explicit CLI flags always win.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::StorageTier;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config unreadable: {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config malformed: {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

/// Tool-wide defaults loaded from a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolConfig {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub archive_root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub registry: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub image_store: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scratch_root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub general_tier: Option<StorageTier>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub restricted_tier: Option<StorageTier>,
}

impl ToolConfig {
    pub fn load(path: &Path) -> Result<ToolConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::TierKind;

    #[test]
    fn loads_partial_config() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("config.toml");
        fs::write(
            &path,
            r#"
archive_root = "/data/archive"
scratch_root = "/scratch"

[general_tier]
name = "general"
root = "/data/general"

[restricted_tier]
name = "restricted"
root = "/data/gdpr"
authorized = false
"#,
        )
        .unwrap();
        let config = ToolConfig::load(&path).unwrap();
        assert_eq!(config.archive_root.as_deref(), Some(Path::new("/data/archive")));
        assert_eq!(config.registry, None);
        let restricted = config.restricted_tier.unwrap();
        assert_eq!(restricted.name, TierKind::Restricted);
        assert!(!restricted.authorized);
        assert!(config.general_tier.unwrap().authorized);
    }

    #[test]
    fn rejects_bad_toml() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("config.toml");
        fs::write(&path, "archive_root = [").unwrap();
        assert!(matches!(
            ToolConfig::load(&path),
            Err(ConfigError::Malformed { .. })
        ));
    }
}
