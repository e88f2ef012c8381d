//! Bare versus transactional timing of one command over generated workspaces.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{generate_workspace, BenchError};
use crate::executor::{ExecutionRequest, Executor, ProcessExecutor};
use crate::policy::{classify_raw, PolicySet, SafetyClass};
use crate::snapshot::{compute_digest, force_remove_dir_all, WorkspaceDigest};
use crate::transaction::lock::{LockError, WorkspaceLock};
use crate::transaction::{ExecOptions, Outcome, Workspace};

pub const DEFAULT_REPETITIONS: usize = 10;
/// One generated file per 128 KiB, roughly 2000 files for 250 MiB.
const BYTES_PER_FILE: u64 = 128 * 1024;

#[derive(Debug, Clone)]
pub struct OverheadOptions {
    /// Measured repetitions per size; one extra warm-up pair runs first.
    pub repetitions: usize,
    pub seed: u64,
    /// Scratch space for workspaces and stores. A temporary directory when unset.
    pub work_dir: Option<PathBuf>,
    /// Directory holding the bench lock. Shared by default so concurrent
    /// harness processes exclude each other.
    pub lock_dir: PathBuf,
    pub exec: ExecOptions,
}

impl Default for OverheadOptions {
    fn default() -> Self {
        OverheadOptions {
            repetitions: DEFAULT_REPETITIONS,
            seed: 1,
            work_dir: None,
            lock_dir: std::env::temp_dir().join("txbox-bench"),
            exec: ExecOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub command: String,
    pub workspace_size_bytes: u64,
    pub file_count: usize,
    pub repetitions: usize,
    pub baseline_ms: Vec<f64>,
    pub sandboxed_ms: Vec<f64>,
    pub snapshot_ms: Vec<f64>,
    pub mean_baseline: f64,
    pub mean_sandboxed: f64,
    pub min_baseline: f64,
    pub max_baseline: f64,
    pub min_sandboxed: f64,
    pub max_sandboxed: f64,
    pub overhead_ms: f64,
    /// `100 * overhead_ms / mean_baseline`.
    pub overhead_pct: f64,
    pub snapshot_ms_mean: f64,
    /// `snapshot_ms_mean / overhead_ms`.
    pub snapshot_share: f64,
    /// Times the workspace had to be regenerated because a run changed it.
    pub regenerations: usize,
}

impl OverheadReport {
    fn from_samples(
        command: &str,
        size: u64,
        file_count: usize,
        baseline_ms: Vec<f64>,
        sandboxed_ms: Vec<f64>,
        snapshot_ms: Vec<f64>,
        regenerations: usize,
    ) -> Self {
        let mean_baseline = mean(&baseline_ms);
        let mean_sandboxed = mean(&sandboxed_ms);
        let overhead_ms = mean_sandboxed - mean_baseline;
        let snapshot_ms_mean = mean(&snapshot_ms);
        OverheadReport {
            command: command.to_string(),
            workspace_size_bytes: size,
            file_count,
            repetitions: baseline_ms.len(),
            min_baseline: fold(&baseline_ms, f64::min),
            max_baseline: fold(&baseline_ms, f64::max),
            min_sandboxed: fold(&sandboxed_ms, f64::min),
            max_sandboxed: fold(&sandboxed_ms, f64::max),
            baseline_ms,
            sandboxed_ms,
            snapshot_ms,
            mean_baseline,
            mean_sandboxed,
            overhead_ms,
            overhead_pct: 100.0 * overhead_ms / mean_baseline,
            snapshot_ms_mean,
            snapshot_share: snapshot_ms_mean / overhead_ms,
            regenerations,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fold(xs: &[f64], f: fn(f64, f64) -> f64) -> f64 {
    xs.iter().copied().reduce(f).unwrap_or(f64::NAN)
}

/// Files generated for a workspace of `size` bytes.
pub fn file_count_for(size: u64) -> usize {
    size.div_ceil(BYTES_PER_FILE).max(1) as usize
}

/// Times `command` bare and inside a transaction on a generated workspace of
/// each size. Runs alternate bare/transactional, the first pair is discarded,
/// and every run starts from a workspace with the reference digest.
pub fn run_overhead_bench(
    command: &str,
    sizes: &[u64],
    policy: &PolicySet,
    opts: &OverheadOptions,
) -> Result<Vec<OverheadReport>, BenchError> {
    let (_, decision) = classify_raw(command, policy)
        .map_err(|e| BenchError::Misconfigured(format!("command does not parse: {e}")))?;
    if decision.class != SafetyClass::Uncertain {
        return Err(BenchError::Misconfigured(format!(
            "`{command}` classifies as {}; only UNCERTAIN commands take the snapshot path",
            decision.class
        )));
    }
    if opts.repetitions < 3 {
        return Err(BenchError::Misconfigured("at least 3 repetitions are required".into()));
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BenchError::Io { path, source }
    };
    fs::create_dir_all(&opts.lock_dir).map_err(io(&opts.lock_dir))?;
    let _lock = WorkspaceLock::acquire(&opts.lock_dir).map_err(|e| match e {
        LockError::Held { pid } => BenchError::Busy { pid },
        LockError::Io(source) => BenchError::Io {
            path: opts.lock_dir.clone(),
            source,
        },
    })?;

    let scratch;
    let work_dir = match &opts.work_dir {
        Some(d) => d.clone(),
        None => {
            scratch = tempfile::Builder::new()
                .prefix("txbox-overhead-")
                .tempdir()
                .map_err(io(&std::env::temp_dir()))?;
            scratch.path().to_path_buf()
        }
    };

    let mut reports = Vec::new();
    for &size in sizes {
        let root = work_dir.join(format!("ws-{size}"));
        let store = work_dir.join(format!("store-{size}"));
        for dir in [&root, &store] {
            if dir.exists() {
                force_remove_dir_all(dir).map_err(io(dir))?;
            }
        }
        let file_count = file_count_for(size);
        let regenerate = |root: &Path| -> Result<(), BenchError> {
            if size == 0 {
                fs::create_dir_all(root).map_err(io(root))
            } else {
                generate_workspace(root, size, file_count, opts.seed).map(|_| ())
            }
        };
        regenerate(&root)?;
        let reference = compute_digest(&root)?;
        let ws = Workspace::open(&root, &store)?;
        let mut regenerations = 0;
        let reset = |regenerations: &mut usize| -> Result<(), BenchError> {
            if compute_digest(&root)? != reference {
                *regenerations += 1;
                for entry in fs::read_dir(&root).map_err(io(&root))? {
                    let p = entry.map_err(io(&root))?.path();
                    if p.is_dir() && !p.is_symlink() {
                        force_remove_dir_all(&p).map_err(io(&p))?;
                    } else {
                        fs::remove_file(&p).map_err(io(&p))?;
                    }
                }
                regenerate(&root)?;
                check_reference(&root, &reference)?;
            }
            Ok(())
        };

        let mut baseline_ms = Vec::new();
        let mut sandboxed_ms = Vec::new();
        let mut snapshot_ms = Vec::new();
        for rep in 0..=opts.repetitions {
            reset(&mut regenerations)?;
            let mut req = ExecutionRequest::shell(command, ws.root());
            req.env = opts.exec.env.clone();
            if let Some(t) = opts.exec.timeout {
                req.timeout = t;
            }
            let t = Instant::now();
            let bare = ProcessExecutor.execute(&req)?;
            let bare_ms = t.elapsed().as_secs_f64() * 1000.0;
            if bare.timed_out {
                return Err(BenchError::Execution(format!("`{command}` timed out")));
            }

            reset(&mut regenerations)?;
            let rec = ws.run_transaction(command, policy, &opts.exec)?;
            if !matches!(rec.outcome, Outcome::Committed | Outcome::RolledBack) {
                let why = rec.error.map(|e| e.message).unwrap_or_default();
                return Err(BenchError::Execution(format!(
                    "transaction ended {} at {size} bytes: {why}",
                    rec.outcome
                )));
            }
            if rep > 0 {
                baseline_ms.push(bare_ms);
                sandboxed_ms.push(rec.timings.total_ms);
                snapshot_ms.push(rec.timings.snapshot_ms);
            }
        }
        drop(ws);
        force_remove_dir_all(&root).map_err(io(&root))?;
        force_remove_dir_all(&store).map_err(io(&store))?;
        reports.push(OverheadReport::from_samples(
            command,
            size,
            if size == 0 { 0 } else { file_count },
            baseline_ms,
            sandboxed_ms,
            snapshot_ms,
            regenerations,
        ));
    }
    Ok(reports)
}

fn check_reference(root: &Path, reference: &WorkspaceDigest) -> Result<(), BenchError> {
    let now = compute_digest(root)?;
    if &now != reference {
        return Err(BenchError::Fixture(format!(
            "regenerated workspace digest {} differs from reference {}",
            now.value, reference.value
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(dir: &Path, reps: usize) -> OverheadOptions {
        OverheadOptions {
            repetitions: reps,
            work_dir: Some(dir.join("work")),
            lock_dir: dir.join("lock"),
            ..OverheadOptions::default()
        }
    }

    #[test]
    fn safe_or_blocked_commands_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let policy = PolicySet::default_policy();
        for cmd in ["ls", "rm -rf /"] {
            let err = run_overhead_bench(cmd, &[1024], &policy, &opts(dir.path(), 3)).unwrap_err();
            assert_eq!(err.code(), "MISCONFIGURED_BENCH");
        }
        let err = run_overhead_bench("true", &[1024], &policy, &opts(dir.path(), 2)).unwrap_err();
        assert_eq!(err.code(), "MISCONFIGURED_BENCH");
    }

    #[test]
    fn empty_workspace_floor() {
        let dir = tempfile::tempdir().unwrap();
        let reports =
            run_overhead_bench("sh -c true", &[0], &PolicySet::default_policy(), &opts(dir.path(), 3))
                .unwrap();
        let r = &reports[0];
        assert_eq!(r.repetitions, 3);
        assert_eq!(r.baseline_ms.len(), 3);
        assert!(r.snapshot_ms_mean < 50.0, "{r:?}");
        assert!((r.overhead_ms - (r.mean_sandboxed - r.mean_baseline)).abs() < 1e-9);
        assert!((r.overhead_pct - 100.0 * r.overhead_ms / r.mean_baseline).abs() < 1e-9);
    }

    #[test]
    fn mutating_command_sees_identical_starts() {
        let dir = tempfile::tempdir().unwrap();
        let reports = run_overhead_bench(
            "echo x >> extra.txt",
            &[64 * 1024],
            &PolicySet::default_policy(),
            &opts(dir.path(), 3),
        )
        .unwrap();
        // Every run changes the tree, so each run but the first needs a fresh one.
        assert_eq!(reports[0].regenerations, 2 * 4 - 1);
    }

    #[test]
    fn bench_lock_excludes_a_second_run() {
        let dir = tempfile::tempdir().unwrap();
        let o = opts(dir.path(), 3);
        fs::create_dir_all(&o.lock_dir).unwrap();
        let _held = WorkspaceLock::acquire(&o.lock_dir).unwrap();
        let err = run_overhead_bench("sh -c true", &[0], &PolicySet::default_policy(), &o).unwrap_err();
        assert_eq!(err.code(), "BENCH_BUSY");
    }
}
