//! Service configuration file (TOML).
//!
//! ```toml
//! policy = "/etc/txbox/policy.toml"   # optional, built-in policy otherwise
//!
//! [defaults]
//! timeout_ms = 120000
//! output_cap = 1048576
//! queue_depth = 32
//! compute_digests = true
//!
//! [workspaces.proj]
//! root = "/home/me/proj"
//! store_dir = "/var/tmp/txbox/proj"
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ServiceError;
use crate::executor::{DEFAULT_OUTPUT_CAP, DEFAULT_TIMEOUT};

pub const DEFAULT_QUEUE_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceDefaults {
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_output_cap")]
    pub output_cap: usize,
    #[serde(default = "default_queue_depth")]
    pub queue_depth: usize,
    #[serde(default = "default_true")]
    pub compute_digests: bool,
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT.as_millis() as u64
}

fn default_output_cap() -> usize {
    DEFAULT_OUTPUT_CAP
}

fn default_queue_depth() -> usize {
    DEFAULT_QUEUE_DEPTH
}

fn default_true() -> bool {
    true
}

impl Default for ServiceDefaults {
    fn default() -> Self {
        ServiceDefaults {
            timeout_ms: default_timeout_ms(),
            output_cap: default_output_cap(),
            queue_depth: default_queue_depth(),
            compute_digests: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceEntry {
    pub root: PathBuf,
    pub store_dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    #[serde(default)]
    pub defaults: ServiceDefaults,
    #[serde(default)]
    pub workspaces: BTreeMap<String, WorkspaceEntry>,
}

impl ServiceConfig {
    pub fn from_toml(source: &str) -> Result<ServiceConfig, ServiceError> {
        toml::from_str(source).map_err(|e| ServiceError::Config {
            path: None,
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<ServiceConfig, ServiceError> {
        let text = fs::read_to_string(path).map_err(|e| ServiceError::Config {
            path: Some(path.to_path_buf()),
            message: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ServiceError::Config { message, .. } => ServiceError::Config {
                path: Some(path.to_path_buf()),
                message,
            },
            other => other,
        })
    }

    /// Loads `path`, or starts from an empty config if it does not exist yet.
    pub fn load_or_default(path: &Path) -> Result<ServiceConfig, ServiceError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(ServiceConfig::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ServiceError> {
        let text = toml::to_string_pretty(self).map_err(|e| ServiceError::Config {
            path: Some(path.to_path_buf()),
            message: e.to_string(),
        })?;
        let io = |e: std::io::Error| ServiceError::Config {
            path: Some(path.to_path_buf()),
            message: e.to_string(),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn register_workspace(
        &mut self,
        alias: &str,
        root: &Path,
        store_dir: &Path,
    ) -> Result<(), ServiceError> {
        if alias.is_empty() || alias.contains(['/', '\0']) {
            return Err(ServiceError::InvalidAlias(alias.to_string()));
        }
        if self.workspaces.contains_key(alias) {
            return Err(ServiceError::AliasTaken(alias.to_string()));
        }
        let root = root.canonicalize().ok().filter(|r| r.is_dir()).ok_or_else(|| {
            ServiceError::InvalidRoot {
                root: root.to_path_buf(),
            }
        })?;
        let store_dir = if store_dir.is_absolute() {
            store_dir.to_path_buf()
        } else {
            std::env::current_dir()
                .map_err(|_| ServiceError::InvalidRoot {
                    root: store_dir.to_path_buf(),
                })?
                .join(store_dir)
        };
        self.workspaces
            .insert(alias.to_string(), WorkspaceEntry { root, store_dir });
        Ok(())
    }
}

/// Registers a workspace and persists the updated config file.
pub fn register_workspace(
    config_path: &Path,
    alias: &str,
    root: &Path,
    store_dir: &Path,
) -> Result<(), ServiceError> {
    let mut config = ServiceConfig::load_or_default(config_path)?;
    config.register_workspace(alias, root, store_dir)?;
    config.save(config_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_persists_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("service.toml");
        let root = dir.path().join("proj");
        fs::create_dir(&root).unwrap();
        register_workspace(&cfg, "proj", &root, &dir.path().join("store")).unwrap();
        let loaded = ServiceConfig::load(&cfg).unwrap();
        assert_eq!(loaded.workspaces["proj"].root, root.canonicalize().unwrap());
        let err = register_workspace(&cfg, "proj", &root, &dir.path().join("s2")).unwrap_err();
        assert_eq!(err.code(), "ALIAS_TAKEN");
    }

    #[test]
    fn invalid_root_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ServiceConfig::default();
        let err = cfg
            .register_workspace("x", &dir.path().join("missing"), dir.path())
            .unwrap_err();
        assert_eq!(err.code(), "INVALID_ROOT");
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = ServiceConfig::from_toml("[workspaces.a]\nroot = \"/a\"\nstore_dir = \"/s\"\n").unwrap();
        assert_eq!(cfg.defaults, ServiceDefaults::default());
        assert_eq!(cfg.defaults.queue_depth, 32);
        assert!(ServiceConfig::from_toml("bogus = 1").is_err());
    }
}
