//! Settings resolution: built-in defaults, then the config file, then
//! `TXBOX_*` environment variables, then command-line flags.
//!
//! Config file (TOML, every key optional, relative paths are taken relative
//! to the file):
//!
//! ```toml
//! workspace = "."
//! store = "/var/tmp/txbox/proj"
//! policy = "policy.toml"
//! timeout_ms = 120000
//! output_cap = 1048576
//! log_level = "warn"
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::LevelFilter;
use serde::{Deserialize, Serialize};
use txbox_core::executor::{DEFAULT_OUTPUT_CAP, DEFAULT_TIMEOUT};
use txbox_core::policy::{PolicyLoadError, PolicySet};
use txbox_core::transaction::default_store_dir;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub workspace: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub timeout_ms: Option<u64>,
    pub output_cap: Option<usize>,
    pub log_level: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| format!("{}: {}", path.display(), e.message()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.workspace, &mut cfg.store, &mut cfg.policy].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Values given on the command line or through the environment.
#[derive(Debug, Default)]
pub struct Overrides {
    pub workspace: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub timeout_ms: Option<u64>,
    pub output_cap: Option<usize>,
    pub log_level: Option<String>,
}

/// Fully resolved settings.
#[derive(Debug, Clone, Serialize)]
pub struct CliConfig {
    pub workspace_root: PathBuf,
    pub store_dir: PathBuf,
    /// `None` selects the built-in policy.
    pub policy_path: Option<PathBuf>,
    pub timeout_ms: u64,
    pub output_cap: usize,
    pub verbosity: String,
}

impl CliConfig {
    pub fn resolve(file: FileConfig, over: Overrides) -> Result<CliConfig, String> {
        let workspace_root = over
            .workspace
            .or(file.workspace)
            .map(Ok)
            .unwrap_or_else(std::env::current_dir)
            .map_err(|e| format!("cannot determine the current directory: {e}"))?;
        let store_dir = over
            .store
            .or(file.store)
            .unwrap_or_else(|| default_store_dir(&workspace_root));
        let timeout_ms = over
            .timeout_ms
            .or(file.timeout_ms)
            .unwrap_or(DEFAULT_TIMEOUT.as_millis() as u64);
        let output_cap = over.output_cap.or(file.output_cap).unwrap_or(DEFAULT_OUTPUT_CAP);
        if timeout_ms == 0 {
            return Err("timeout_ms must be positive".into());
        }
        if output_cap == 0 {
            return Err("output_cap must be positive".into());
        }
        let verbosity = over
            .log_level
            .or(file.log_level)
            .unwrap_or_else(|| "warn".to_string());
        parse_level(&verbosity)?;
        Ok(CliConfig {
            workspace_root,
            store_dir,
            policy_path: over.policy.or(file.policy),
            timeout_ms,
            output_cap,
            verbosity,
        })
    }

    pub fn level(&self) -> LevelFilter {
        parse_level(&self.verbosity).unwrap_or(LevelFilter::Warn)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn load_policy(&self) -> Result<PolicySet, PolicyLoadError> {
        match &self.policy_path {
            Some(p) => PolicySet::from_path(p),
            None => Ok(PolicySet::default_policy()),
        }
    }
}

fn parse_level(text: &str) -> Result<LevelFilter, String> {
    text.parse()
        .map_err(|_| format!("unknown log level `{text}` (off, error, warn, info, debug, trace)"))
}
