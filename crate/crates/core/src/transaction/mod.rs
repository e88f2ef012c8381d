//! The transactional execution loop.
//!
//! A [`Workspace`] owns a root directory and a store directory laid out as
//!
//! ```text
//! <store_dir>/.lock         owner pid, held for the lifetime of the handle
//! <store_dir>/journal.log   one line per transaction (see `journal`)
//! <store_dir>/snapshots/    restore points of in-flight transactions
//! <store_dir>/QUARANTINED   present while the workspace is quarantined
//! ```
//!
//! Anything left in `snapshots/` when a workspace is opened belongs to a
//! transaction that never finished, so the workspace is quarantined until an
//! operator resets it.

pub(crate) mod lock;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, TryLockError};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{
    ExecError, ExecutionRequest, ExecutionResult, Executor, ProcessExecutor, DEFAULT_OUTPUT_CAP,
    DEFAULT_TIMEOUT,
};
use crate::journal::{Journal, JournalError, JournalRecord, JOURNAL_FILE};
use crate::policy::{classify_raw, ParseError, PolicyDecision, PolicySet, SafetyClass};
use crate::snapshot::{
    compute_digest, force_remove_dir_all, CopyBackend, Snapshot, SnapshotBackend,
    WorkspaceDigest,
};

pub use lock::{is_alive, LOCK_FILE};
use lock::{LockError, WorkspaceLock};

pub const SNAPSHOT_SUBDIR: &str = "snapshots";
pub const QUARANTINE_MARKER: &str = "QUARANTINED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    ExecutedSafe,
    Blocked,
    Committed,
    RolledBack,
    Fatal,
}

impl Outcome {
    pub const ALL: [Outcome; 5] = [
        Outcome::ExecutedSafe,
        Outcome::Blocked,
        Outcome::Committed,
        Outcome::RolledBack,
        Outcome::Fatal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::ExecutedSafe => "EXECUTED_SAFE",
            Outcome::Blocked => "BLOCKED",
            Outcome::Committed => "COMMITTED",
            Outcome::RolledBack => "ROLLED_BACK",
            Outcome::Fatal => "FATAL",
        }
    }

    pub fn parse(text: &str) -> Option<Outcome> {
        Outcome::ALL
            .into_iter()
            .find(|o| o.as_str().eq_ignore_ascii_case(text))
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Wall-clock milliseconds spent in each phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub classify_ms: f64,
    pub snapshot_ms: f64,
    pub execute_ms: f64,
    /// Commit or rollback, including digest verification.
    pub finalize_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    PolicyViolation,
    StateRolledBack,
    FatalRestoreFailure,
    SpawnFailed,
    SnapshotFailed,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::PolicyViolation => "POLICY_VIOLATION",
            ErrorCode::StateRolledBack => "STATE_ROLLED_BACK",
            ErrorCode::FatalRestoreFailure => "FATAL_RESTORE_FAILURE",
            ErrorCode::SpawnFailed => "SPAWN_FAILED",
            ErrorCode::SnapshotFailed => "SNAPSHOT_FAILED",
        }
    }
}

/// Structured error feedback. `message` always starts with `"<CODE>: "`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default)]
    pub detail: BTreeMap<String, String>,
}

impl ErrorInfo {
    fn new(code: ErrorCode, text: impl std::fmt::Display) -> Self {
        ErrorInfo {
            code,
            message: format!("{}: {}", code.as_str(), text),
            detail: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.detail.insert(key.to_string(), value.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub txn_id: String,
    pub workspace_root: PathBuf,
    pub command_raw: String,
    pub decision: PolicyDecision,
    pub outcome: Outcome,
    pub pre_digest: Option<WorkspaceDigest>,
    pub post_digest: Option<WorkspaceDigest>,
    pub execution: Option<ExecutionResult>,
    pub timings: PhaseTimings,
    pub error: Option<ErrorInfo>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl TransactionRecord {
    pub fn rolled_back(&self) -> bool {
        self.outcome == Outcome::RolledBack
    }
}

/// Per-call overrides of the workspace defaults.
#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    pub timeout: Option<Duration>,
    pub output_cap: Option<usize>,
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct WorkspaceOptions {
    /// Record digests on the SAFE and BLOCKED paths too.
    pub compute_digests: bool,
    pub default_timeout: Duration,
    pub default_output_cap: usize,
}

impl Default for WorkspaceOptions {
    fn default() -> Self {
        WorkspaceOptions {
            compute_digests: true,
            default_timeout: DEFAULT_TIMEOUT,
            default_output_cap: DEFAULT_OUTPUT_CAP,
        }
    }
}

#[derive(Debug, Error)]
pub enum TxnError {
    #[error("WORKSPACE_QUARANTINED: {root} needs an operator reset ({reason})")]
    Quarantined { root: PathBuf, reason: String },
    #[error("WORKSPACE_BUSY: {root} is locked{}", holder.map(|p| format!(" by pid {p}")).unwrap_or_default())]
    Busy { root: PathBuf, holder: Option<u32> },
    #[error("NOT_QUARANTINED: {root} is not quarantined")]
    NotQuarantined { root: PathBuf },
    #[error("PARSE_ERROR: {0}")]
    Parse(#[from] ParseError),
    #[error("INVALID_ROOT: {root}: {reason}")]
    InvalidRoot { root: PathBuf, reason: String },
    #[error("IO_ERROR: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Journal(JournalError),
    #[error("JOURNAL_WRITE_FAILED: transaction {} finished as {} but was not journaled: {source}", record.txn_id, record.outcome)]
    JournalWrite {
        record: Box<TransactionRecord>,
        #[source]
        source: JournalError,
    },
}

impl TxnError {
    pub fn code(&self) -> &'static str {
        match self {
            TxnError::Quarantined { .. } => "WORKSPACE_QUARANTINED",
            TxnError::Busy { .. } => "WORKSPACE_BUSY",
            TxnError::NotQuarantined { .. } => "NOT_QUARANTINED",
            TxnError::Parse(_) => "PARSE_ERROR",
            TxnError::InvalidRoot { .. } => "INVALID_ROOT",
            TxnError::Io { .. } => "IO_ERROR",
            TxnError::Journal(e) => e.code(),
            TxnError::JournalWrite { .. } => "JOURNAL_WRITE_FAILED",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TxnError + '_ {
    move |source| TxnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub struct WorkspaceBuilder {
    root: PathBuf,
    store_dir: PathBuf,
    options: WorkspaceOptions,
    executor: Arc<dyn Executor>,
    backend: Arc<dyn SnapshotBackend>,
}

impl WorkspaceBuilder {
    pub fn options(mut self, options: WorkspaceOptions) -> Self {
        self.options = options;
        self
    }

    pub fn executor(mut self, executor: Arc<dyn Executor>) -> Self {
        self.executor = executor;
        self
    }

    pub fn backend(mut self, backend: Arc<dyn SnapshotBackend>) -> Self {
        self.backend = backend;
        self
    }

    /// Validates the directories, takes the lock and runs the recovery scan.
    pub fn open(self) -> Result<Workspace, TxnError> {
        let invalid = |reason: &str| TxnError::InvalidRoot {
            root: self.root.clone(),
            reason: reason.to_string(),
        };
        if !self.root.is_dir() {
            return Err(invalid("not an existing directory"));
        }
        let root = self.root.canonicalize().map_err(io_err(&self.root))?;
        fs::create_dir_all(&self.store_dir).map_err(io_err(&self.store_dir))?;
        let store_dir = self
            .store_dir
            .canonicalize()
            .map_err(io_err(&self.store_dir))?;
        if store_dir.starts_with(&root) {
            return Err(invalid("store directory must live outside the workspace root"));
        }
        let lock = WorkspaceLock::acquire(&store_dir).map_err(|e| match e {
            LockError::Held { pid } => TxnError::Busy {
                root: root.clone(),
                holder: Some(pid),
            },
            LockError::Io(source) => TxnError::Io {
                path: store_dir.join(LOCK_FILE),
                source,
            },
        })?;
        let snapshot_dir = store_dir.join(SNAPSHOT_SUBDIR);
        fs::create_dir_all(&snapshot_dir).map_err(io_err(&snapshot_dir))?;
        let journal = Journal::open(store_dir.join(JOURNAL_FILE)).map_err(TxnError::Journal)?;

        let ws = Workspace {
            root,
            store_dir,
            snapshot_dir,
            executor: self.executor,
            backend: self.backend,
            options: self.options,
            journal: Mutex::new(journal),
            inflight: Mutex::new(()),
            quarantined: AtomicBool::new(false),
            _lock: lock,
        };
        ws.recovery_scan()?;
        Ok(ws)
    }
}

/// An opened workspace. At most one transaction runs on it at a time.
pub struct Workspace {
    root: PathBuf,
    store_dir: PathBuf,
    snapshot_dir: PathBuf,
    executor: Arc<dyn Executor>,
    backend: Arc<dyn SnapshotBackend>,
    options: WorkspaceOptions,
    journal: Mutex<Journal>,
    inflight: Mutex<()>,
    quarantined: AtomicBool,
    _lock: WorkspaceLock,
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workspace")
            .field("root", &self.root)
            .field("store_dir", &self.store_dir)
            .field("quarantined", &self.is_quarantined())
            .finish()
    }
}

impl Workspace {
    pub fn builder(root: impl Into<PathBuf>, store_dir: impl Into<PathBuf>) -> WorkspaceBuilder {
        WorkspaceBuilder {
            root: root.into(),
            store_dir: store_dir.into(),
            options: WorkspaceOptions::default(),
            executor: Arc::new(ProcessExecutor),
            backend: Arc::new(CopyBackend),
        }
    }

    pub fn open(root: impl Into<PathBuf>, store_dir: impl Into<PathBuf>) -> Result<Workspace, TxnError> {
        Self::builder(root, store_dir).open()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store_dir(&self) -> &Path {
        &self.store_dir
    }

    pub fn snapshot_dir(&self) -> &Path {
        &self.snapshot_dir
    }

    pub fn journal_path(&self) -> PathBuf {
        self.store_dir.join(JOURNAL_FILE)
    }

    pub fn is_quarantined(&self) -> bool {
        self.quarantined.load(Ordering::SeqCst)
    }

    fn marker_path(&self) -> PathBuf {
        self.store_dir.join(QUARANTINE_MARKER)
    }

    fn orphan_snapshots(&self) -> Result<Vec<PathBuf>, TxnError> {
        let mut found = Vec::new();
        for entry in fs::read_dir(&self.snapshot_dir).map_err(io_err(&self.snapshot_dir))? {
            found.push(entry.map_err(io_err(&self.snapshot_dir))?.path());
        }
        found.sort();
        Ok(found)
    }

    fn recovery_scan(&self) -> Result<(), TxnError> {
        if self.marker_path().exists() {
            self.quarantined.store(true, Ordering::SeqCst);
            return Ok(());
        }
        let orphans = self.orphan_snapshots()?;
        if !orphans.is_empty() {
            let names: Vec<String> = orphans
                .iter()
                .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
                .collect();
            log::warn!(
                "{}: unfinished transaction snapshots found ({}); quarantining",
                self.root.display(),
                names.join(", ")
            );
            self.quarantine(&format!("unfinished transaction snapshots: {}", names.join(", ")))?;
        }
        Ok(())
    }

    fn quarantine(&self, reason: &str) -> Result<(), TxnError> {
        self.quarantined.store(true, Ordering::SeqCst);
        let marker = self.marker_path();
        fs::write(&marker, format!("{reason}\n")).map_err(io_err(&marker))
    }

    fn quarantine_reason(&self) -> String {
        fs::read_to_string(self.marker_path())
            .map(|s| s.trim().to_string())
            .unwrap_or_else(|_| "restore verification failed".to_string())
    }

    fn busy(&self) -> TxnError {
        TxnError::Busy {
            root: self.root.clone(),
            holder: Some(std::process::id()),
        }
    }

    fn enter(&self) -> Result<std::sync::MutexGuard<'_, ()>, TxnError> {
        match self.inflight.try_lock() {
            Ok(g) => Ok(g),
            Err(TryLockError::Poisoned(p)) => Ok(p.into_inner()),
            Err(TryLockError::WouldBlock) => Err(self.busy()),
        }
    }

    /// Clears quarantine after an operator has inspected the workspace. Any
    /// leftover snapshots are discarded and the acknowledgment is journaled.
    pub fn reset_quarantine(&self, operator_ack: &str) -> Result<(), TxnError> {
        let _guard = self.enter()?;
        if !self.is_quarantined() {
            return Err(TxnError::NotQuarantined {
                root: self.root.clone(),
            });
        }
        let mut discarded = Vec::new();
        for orphan in self.orphan_snapshots()? {
            force_remove_dir_all(&orphan).map_err(io_err(&orphan))?;
            discarded.push(orphan.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
        let record = JournalRecord::QuarantineReset {
            at: Utc::now(),
            operator_ack: operator_ack.to_string(),
            discarded_snapshots: discarded,
        };
        self.journal
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .append(&record)
            .map_err(TxnError::Journal)?;
        let marker = self.marker_path();
        match fs::remove_file(&marker) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(&marker)(e)),
        }
        self.quarantined.store(false, Ordering::SeqCst);
        Ok(())
    }

    /// Appends a record produced elsewhere (the safety suite aggregates its
    /// per-attempt workspaces into one journal this way).
    pub fn journal_record(&self, record: &TransactionRecord) -> Result<u64, TxnError> {
        self.journal
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .append(&JournalRecord::Transaction(record.clone()))
            .map_err(TxnError::Journal)
    }

    fn optional_digest(&self) -> Option<WorkspaceDigest> {
        if !self.options.compute_digests {
            return None;
        }
        match compute_digest(&self.root) {
            Ok(d) => Some(d),
            Err(e) => {
                log::warn!("{}: digest unavailable: {e}", self.root.display());
                None
            }
        }
    }

    fn request(&self, raw: &str, opts: &ExecOptions) -> ExecutionRequest {
        ExecutionRequest {
            command: crate::executor::CommandSpec::Shell(raw.to_string()),
            cwd: self.root.clone(),
            env: opts.env.clone(),
            timeout: opts.timeout.unwrap_or(self.options.default_timeout),
            output_cap: opts.output_cap.unwrap_or(self.options.default_output_cap),
        }
    }

    /// Classifies `raw` and runs it: refused if UNSAFE, executed directly if
    /// SAFE, otherwise executed between a snapshot and a commit or rollback.
    /// The record is journaled before it is returned.
    pub fn run_transaction(
        &self,
        raw: &str,
        policy: &PolicySet,
        opts: &ExecOptions,
    ) -> Result<TransactionRecord, TxnError> {
        let _guard = self.enter()?;
        if self.is_quarantined() {
            return Err(TxnError::Quarantined {
                root: self.root.clone(),
                reason: self.quarantine_reason(),
            });
        }
        let started_at = Utc::now();
        let t0 = Instant::now();
        let (_line, decision) = classify_raw(raw, policy)?;
        let mut timings = PhaseTimings {
            classify_ms: ms(t0.elapsed()),
            ..PhaseTimings::default()
        };
        let mut record = TransactionRecord {
            txn_id: format!("txn-{}", crate::snapshot::new_snapshot_id()),
            workspace_root: self.root.clone(),
            command_raw: raw.to_string(),
            decision,
            outcome: Outcome::Blocked,
            pre_digest: None,
            post_digest: None,
            execution: None,
            timings,
            error: None,
            started_at,
            finished_at: started_at,
        };

        match record.decision.class {
            SafetyClass::Unsafe => self.blocked(&mut record),
            SafetyClass::Safe => self.direct(&mut record, opts, &mut timings),
            SafetyClass::Uncertain => self.transactional(&mut record, opts, &mut timings),
        }

        timings.total_ms = ms(t0.elapsed());
        record.timings = timings;
        record.finished_at = Utc::now();
        let appended = self
            .journal
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .append(&JournalRecord::Transaction(record.clone()));
        match appended {
            Ok(_) => Ok(record),
            Err(source) => Err(TxnError::JournalWrite {
                record: Box::new(record),
                source,
            }),
        }
    }

    fn blocked(&self, record: &mut TransactionRecord) {
        record.pre_digest = self.optional_digest();
        record.outcome = Outcome::Blocked;
        let violation = record.decision.violation().cloned();
        let rule = violation
            .as_ref()
            .and_then(|v| v.rule_id.clone())
            .unwrap_or_default();
        let index = violation.as_ref().map_or(0, |v| v.index);
        record.error = Some(
            ErrorInfo::new(
                ErrorCode::PolicyViolation,
                format!("rule {rule} blocks segment {index}; command was not executed"),
            )
            .with("rule_id", &rule)
            .with("segment_index", index)
            .with("matched_rule_ids", record.decision.matched_rule_ids.join(",")),
        );
        record.post_digest = self.optional_digest();
    }

    fn direct(&self, record: &mut TransactionRecord, opts: &ExecOptions, timings: &mut PhaseTimings) {
        record.pre_digest = self.optional_digest();
        let t = Instant::now();
        let result = self.executor.execute(&self.request(&record.command_raw, opts));
        timings.execute_ms = ms(t.elapsed());
        record.outcome = Outcome::ExecutedSafe;
        match result {
            Ok(r) => record.execution = Some(r),
            Err(e) => record.error = Some(spawn_error(&e)),
        }
        let t = Instant::now();
        record.post_digest = self.optional_digest();
        timings.finalize_ms = ms(t.elapsed());
    }

    fn transactional(&self, record: &mut TransactionRecord, opts: &ExecOptions, timings: &mut PhaseTimings) {
        let t = Instant::now();
        let snap = match self.backend.take(&self.root, &self.snapshot_dir) {
            Ok(s) => s,
            Err(e) => {
                timings.snapshot_ms = ms(t.elapsed());
                record.outcome = Outcome::Blocked;
                record.error = Some(
                    ErrorInfo::new(
                        ErrorCode::SnapshotFailed,
                        format!("{e}; command was not executed"),
                    )
                    .with("cause", e.code()),
                );
                return;
            }
        };
        timings.snapshot_ms = ms(t.elapsed());
        record.pre_digest = Some(snap.pre_digest.clone());

        let t = Instant::now();
        let result = self.executor.execute(&self.request(&record.command_raw, opts));
        timings.execute_ms = ms(t.elapsed());

        let t = Instant::now();
        match result {
            Ok(r) if r.succeeded() => {
                record.outcome = Outcome::Committed;
                record.execution = Some(r);
                match compute_digest(&self.root) {
                    Ok(d) => record.post_digest = Some(d),
                    Err(e) => log::warn!("{}: post-commit digest unavailable: {e}", self.root.display()),
                }
                self.discard(&snap, record);
            }
            other => {
                let failure = match &other {
                    Ok(r) => ErrorInfo::new(
                        ErrorCode::StateRolledBack,
                        format!("command {}; workspace restored to its prior state", describe_failure(r)),
                    ),
                    Err(e) => ErrorInfo::new(
                        ErrorCode::SpawnFailed,
                        format!("{e}; workspace restored to its prior state"),
                    ),
                };
                record.execution = other.ok();
                self.roll_back(&snap, record, failure);
            }
        }
        timings.finalize_ms = ms(t.elapsed());
    }

    fn roll_back(&self, snap: &Snapshot, record: &mut TransactionRecord, failure: ErrorInfo) {
        match self.backend.restore(snap) {
            Ok(report) => {
                record.outcome = Outcome::RolledBack;
                record.post_digest = Some(report.restored_digest.clone());
                record.error = Some(
                    failure
                        .with("snapshot_id", &snap.id)
                        .with("restore_attempts", report.attempts),
                );
                if let Some(r) = &record.execution {
                    let e = record.error.as_mut().expect("just set");
                    if let Some(code) = r.exit_code {
                        e.detail.insert("exit_code".into(), code.to_string());
                    }
                    if let Some(sig) = r.terminated_by_signal {
                        e.detail.insert("signal".into(), sig.to_string());
                    }
                    if r.timed_out {
                        e.detail.insert("timed_out".into(), "true".into());
                    }
                }
                self.discard(snap, record);
            }
            Err(e) => {
                record.outcome = Outcome::Fatal;
                record.post_digest = compute_digest(&self.root).ok();
                let reason = format!("restore of snapshot {} failed: {e}", snap.id);
                if let Err(q) = self.quarantine(&reason) {
                    log::error!("could not persist quarantine marker: {q}");
                }
                log::error!("{}: {reason}; workspace quarantined", self.root.display());
                record.error = Some(
                    ErrorInfo::new(
                        ErrorCode::FatalRestoreFailure,
                        format!("{e}; workspace quarantined, snapshot kept at {}", snap.storage_path.display()),
                    )
                    .with("snapshot_id", &snap.id)
                    .with("snapshot_path", snap.storage_path.display())
                    .with("cause", e.code())
                    .with("original_failure", &failure.message),
                );
            }
        }
    }

    fn discard(&self, snap: &Snapshot, record: &mut TransactionRecord) {
        let mut outcome = self.backend.discard(snap);
        if outcome.is_err() {
            outcome = self.backend.discard(snap);
        }
        if let Err(e) = outcome {
            log::warn!("snapshot {} could not be discarded: {e}", snap.id);
            if let Some(err) = record.error.as_mut() {
                err.detail.insert("discard_error".into(), e.to_string());
            }
        }
    }
}

/// `<tmp>/txbox/<hash of the canonical root>`, used when no store is configured.
pub fn default_store_dir(root: &Path) -> PathBuf {
    use sha2::{Digest, Sha256};
    let canonical = root.canonicalize().unwrap_or_else(|_| root.to_path_buf());
    let hash = Sha256::digest(canonical.as_os_str().as_encoded_bytes());
    std::env::temp_dir()
        .join("txbox")
        .join(hex::encode(&hash[..8]))
}

fn spawn_error(e: &ExecError) -> ErrorInfo {
    let info = ErrorInfo::new(ErrorCode::SpawnFailed, e);
    info.with("cause", e.code())
}

fn describe_failure(r: &ExecutionResult) -> String {
    if r.timed_out {
        format!("timed out after {:.0} ms", ms(r.wall_time))
    } else if let Some(sig) = r.terminated_by_signal {
        format!("was killed by signal {sig}")
    } else {
        format!("exited with status {}", r.exit_code.unwrap_or(-1))
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}
