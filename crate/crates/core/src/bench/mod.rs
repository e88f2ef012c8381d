//! Safety suite and snapshot-overhead benchmarks.
//!
//! Scenarios are TOML manifests, one per file. The built-in suite lives in
//! `fixtures/scenarios/` and is compiled into the crate:
//!
//! ```toml
//! name = "vc-append"
//! category = "VALID_CHANGE"        # WHITELISTED | BLACKLISTED | STATE_CORRUPTION | VALID_CHANGE
//! command = "echo 'requests==2.31.0' >> requirements.txt"
//! expected_outcome = "COMMITTED"
//!
//! [setup]
//! commands = ["git init -q ."]     # run in the fresh workspace before the measured command
//!
//! [[setup.files]]
//! path = "requirements.txt"
//! content = "numpy==1.26.4\n"
//! mode = 0o644                     # optional
//! ```

mod generate;
mod overhead;
mod safety;

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::generate_workspace;
pub use overhead::{
    file_count_for, run_overhead_bench, OverheadOptions, OverheadReport, DEFAULT_REPETITIONS,
};
pub use safety::{
    run_safety_suite, run_safety_suite_with, CategoryResult, SafetyFailure, SafetyReport,
    DEFAULT_ATTEMPTS,
};

use crate::executor::{ExecError, ExecutionRequest, Executor, ProcessExecutor};
use crate::snapshot::SnapshotError;
use crate::transaction::{Outcome, TxnError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("INVALID_ARGUMENT: {0}")]
    InvalidArgument(String),
    #[error("FIXTURE_ERROR: {0}")]
    Fixture(String),
    #[error("MISCONFIGURED_BENCH: {0}")]
    Misconfigured(String),
    #[error("BENCH_BUSY: another benchmark (pid {pid}) holds the bench lock")]
    Busy { pid: u32 },
    #[error("IO_ERROR: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Txn(#[from] TxnError),
    #[error("{0}")]
    Exec(#[from] ExecError),
    #[error("{0}")]
    Snapshot(#[from] SnapshotError),
    #[error("EXECUTION_FAILED: {0}")]
    Execution(String),
}

impl BenchError {
    pub fn code(&self) -> &'static str {
        match self {
            BenchError::InvalidArgument(_) => "INVALID_ARGUMENT",
            BenchError::Fixture(_) => "FIXTURE_ERROR",
            BenchError::Misconfigured(_) => "MISCONFIGURED_BENCH",
            BenchError::Busy { .. } => "BENCH_BUSY",
            BenchError::Io { .. } => "IO_ERROR",
            BenchError::Txn(e) => e.code(),
            BenchError::Exec(e) => e.code(),
            BenchError::Snapshot(e) => e.code(),
            BenchError::Execution(_) => "EXECUTION_FAILED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    Whitelisted,
    Blacklisted,
    StateCorruption,
    ValidChange,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Whitelisted,
        Category::Blacklisted,
        Category::StateCorruption,
        Category::ValidChange,
    ];

    pub fn expected_outcome(&self) -> Outcome {
        match self {
            Category::Whitelisted => Outcome::ExecutedSafe,
            Category::Blacklisted => Outcome::Blocked,
            Category::StateCorruption => Outcome::RolledBack,
            Category::ValidChange => Outcome::Committed,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Whitelisted => "WHITELISTED",
            Category::Blacklisted => "BLACKLISTED",
            Category::StateCorruption => "STATE_CORRUPTION",
            Category::ValidChange => "VALID_CHANGE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetupFile {
    pub path: String,
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub mode: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setup {
    #[serde(default)]
    pub dirs: Vec<String>,
    #[serde(default)]
    pub files: Vec<SetupFile>,
    #[serde(default)]
    pub commands: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub category: Category,
    #[serde(default)]
    pub description: String,
    pub command: String,
    pub expected_outcome: Outcome,
    #[serde(default)]
    pub setup: Setup,
}

const BUILTIN: &[(&str, &str)] = &[
    ("wl-list-files", include_str!("../../fixtures/scenarios/wl-list-files.toml")),
    ("wl-git-status", include_str!("../../fixtures/scenarios/wl-git-status.toml")),
    ("wl-read-pipe", include_str!("../../fixtures/scenarios/wl-read-pipe.toml")),
    ("bl-rm-root", include_str!("../../fixtures/scenarios/bl-rm-root.toml")),
    ("bl-mkfs", include_str!("../../fixtures/scenarios/bl-mkfs.toml")),
    ("sc-failing-installer", include_str!("../../fixtures/scenarios/sc-failing-installer.toml")),
    ("sc-mid-write-crash", include_str!("../../fixtures/scenarios/sc-mid-write-crash.toml")),
    ("sc-sed-partial", include_str!("../../fixtures/scenarios/sc-sed-partial.toml")),
    ("vc-create-file", include_str!("../../fixtures/scenarios/vc-create-file.toml")),
    ("vc-append", include_str!("../../fixtures/scenarios/vc-append.toml")),
];

impl Scenario {
    /// Parses a manifest. The expected outcome must agree with the category.
    pub fn from_toml(source: &str) -> Result<Scenario, BenchError> {
        let s: Scenario = toml::from_str(source).map_err(|e| BenchError::Fixture(e.message().to_string()))?;
        if s.expected_outcome != s.category.expected_outcome() {
            return Err(BenchError::Fixture(format!(
                "scenario {}: category {} implies {}, manifest says {}",
                s.name,
                s.category.as_str(),
                s.category.expected_outcome(),
                s.expected_outcome
            )));
        }
        for f in &s.setup.files {
            check_relative(&f.path)?;
        }
        for d in &s.setup.dirs {
            check_relative(d)?;
        }
        Ok(s)
    }

    /// Populates a fresh workspace root. Runs setup commands last.
    pub fn prepare(&self, root: &Path) -> Result<(), BenchError> {
        let fixture = |what: &str, e: &dyn std::fmt::Display| {
            BenchError::Fixture(format!("scenario {}: {what}: {e}", self.name))
        };
        for d in &self.setup.dirs {
            fs::create_dir_all(root.join(d)).map_err(|e| fixture(d, &e))?;
        }
        for f in &self.setup.files {
            let path = root.join(&f.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| fixture(&f.path, &e))?;
            }
            fs::write(&path, &f.content).map_err(|e| fixture(&f.path, &e))?;
            if let Some(mode) = f.mode {
                fs::set_permissions(&path, fs::Permissions::from_mode(mode))
                    .map_err(|e| fixture(&f.path, &e))?;
            }
        }
        for cmd in &self.setup.commands {
            let result = ProcessExecutor
                .execute(&ExecutionRequest::shell(cmd.as_str(), root))
                .map_err(|e| fixture(cmd, &e))?;
            if !result.succeeded() {
                return Err(fixture(
                    cmd,
                    &format!("exit {:?}: {}", result.exit_code, result.stderr.lossy().trim()),
                ));
            }
        }
        Ok(())
    }
}

fn check_relative(path: &str) -> Result<(), BenchError> {
    let p = Path::new(path);
    if p.as_os_str().is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(BenchError::Fixture(format!("setup path `{path}` must be relative and normal")));
    }
    Ok(())
}

/// The shipped ten-scenario suite.
pub fn builtin_scenarios() -> Vec<Scenario> {
    BUILTIN
        .iter()
        .map(|(name, text)| {
            Scenario::from_toml(text).unwrap_or_else(|e| panic!("built-in scenario {name}: {e}"))
        })
        .collect()
}

/// Loads every `*.toml` manifest in `dir`, sorted by file name.
pub fn load_scenarios(dir: &Path) -> Result<Vec<Scenario>, BenchError> {
    let io = |source| BenchError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|source| BenchError::Io {
                path: p.clone(),
                source,
            })?;
            Scenario::from_toml(&text)
                .map_err(|e| BenchError::Fixture(format!("{}: {e}", p.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{classify_raw, PolicySet, SafetyClass};

    #[test]
    fn builtin_suite_shape() {
        let suite = builtin_scenarios();
        assert_eq!(suite.len(), 10);
        let count = |c: Category| suite.iter().filter(|s| s.category == c).count();
        assert_eq!(count(Category::Whitelisted) + count(Category::Blacklisted), 5);
        assert_eq!(count(Category::StateCorruption) + count(Category::ValidChange), 5);
    }

    #[test]
    fn builtin_matches_fixture_directory() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios");
        let mut loaded = load_scenarios(&dir).unwrap();
        let mut builtin = builtin_scenarios();
        loaded.sort_by(|a, b| a.name.cmp(&b.name));
        builtin.sort_by(|a, b| a.name.cmp(&b.name));
        assert_eq!(loaded, builtin);
    }

    #[test]
    fn classification_agrees_with_category() {
        let policy = PolicySet::default_policy();
        for s in builtin_scenarios() {
            let (_, d) = classify_raw(&s.command, &policy).unwrap();
            let expected = match s.category {
                Category::Whitelisted => SafetyClass::Safe,
                Category::Blacklisted => SafetyClass::Unsafe,
                _ => SafetyClass::Uncertain,
            };
            assert_eq!(d.class, expected, "{}", s.name);
        }
    }

    #[test]
    fn inconsistent_manifest_is_rejected() {
        let text = "name = \"x\"\ncategory = \"VALID_CHANGE\"\ncommand = \"true\"\nexpected_outcome = \"BLOCKED\"\n";
        assert_eq!(Scenario::from_toml(text).unwrap_err().code(), "FIXTURE_ERROR");
        let text = "name = \"x\"\ncategory = \"VALID_CHANGE\"\ncommand = \"true\"\nexpected_outcome = \"COMMITTED\"\n[[setup.files]]\npath = \"../escape\"\n";
        assert_eq!(Scenario::from_toml(text).unwrap_err().code(), "FIXTURE_ERROR");
    }

    #[test]
    fn failing_setup_is_fixture_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = builtin_scenarios().remove(0);
        s.setup.commands = vec!["exit 4".into()];
        assert_eq!(s.prepare(dir.path()).unwrap_err().code(), "FIXTURE_ERROR");
    }
}
