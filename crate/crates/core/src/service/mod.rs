//! Headless request/response endpoint for agents.
//!
//! Requests and responses are single-line JSON objects. A request:
//!
//! ```json
//! {"request_id": "7", "workspace": "proj", "command": "pip install requests", "timeout_ms": 60000, "env": {"PIP_NO_INPUT": "1"}}
//! ```
//!
//! `id` is accepted as an alias of `request_id`. `workspace` is a registered
//! alias or root path and may be omitted when exactly one workspace is
//! registered. `{"op":"shutdown"}` stops the service once in-flight requests
//! have been answered.
//!
//! Every request gets exactly one response, written as soon as it completes,
//! so responses may arrive out of request order. Lines that cannot be parsed
//! are answered with `error_code = "BAD_REQUEST"` and a null `request_id`.
//! The service writes nothing except responses and never reads a terminal.

pub mod config;

use std::collections::{BTreeMap, HashSet};
use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use config::{register_workspace, ServiceConfig, ServiceDefaults, WorkspaceEntry};

use crate::policy::{PolicyLoadError, PolicySet};
use crate::transaction::{
    ExecOptions, Outcome, PhaseTimings, TransactionRecord, TxnError, Workspace, WorkspaceOptions,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("CONFIG_ERROR: {}{message}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Config { path: Option<PathBuf>, message: String },
    #[error("ALIAS_TAKEN: workspace alias `{0}` is already registered")]
    AliasTaken(String),
    #[error("INVALID_ALIAS: `{0}`")]
    InvalidAlias(String),
    #[error("INVALID_ROOT: {} is not an existing directory", root.display())]
    InvalidRoot { root: PathBuf },
    #[error("NO_WORKSPACES: the configuration registers no workspace")]
    NoWorkspaces,
    #[error("{0}")]
    Policy(#[from] PolicyLoadError),
    #[error("workspace `{alias}`: {source}")]
    Workspace {
        alias: String,
        #[source]
        source: TxnError,
    },
    #[error("TRANSPORT_ERROR: {0}")]
    Transport(#[from] io::Error),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Config { .. } => "CONFIG_ERROR",
            ServiceError::AliasTaken(_) => "ALIAS_TAKEN",
            ServiceError::InvalidAlias(_) => "INVALID_ALIAS",
            ServiceError::InvalidRoot { .. } => "INVALID_ROOT",
            ServiceError::NoWorkspaces => "NO_WORKSPACES",
            ServiceError::Policy(e) => e.code(),
            ServiceError::Workspace { source, .. } => source.code(),
            ServiceError::Transport(_) => "TRANSPORT_ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentRequest {
    #[serde(alias = "id")]
    pub request_id: String,
    #[serde(default)]
    pub workspace: Option<String>,
    pub command: String,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
    #[serde(default)]
    pub env: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub request_id: Option<String>,
    /// Absent when the request never reached a transaction.
    pub outcome: Option<Outcome>,
    pub exit_code: Option<i32>,
    pub stdout_b64: String,
    pub stderr_b64: String,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub error_code: Option<String>,
    pub error_message: Option<String>,
    pub timings: Option<PhaseTimings>,
    pub rolled_back: bool,
    pub txn_id: Option<String>,
}

impl AgentResponse {
    pub fn error(request_id: Option<String>, code: &str, message: impl Into<String>) -> Self {
        AgentResponse {
            request_id,
            outcome: None,
            exit_code: None,
            stdout_b64: String::new(),
            stderr_b64: String::new(),
            stdout_truncated: false,
            stderr_truncated: false,
            error_code: Some(code.to_string()),
            error_message: Some(message.into()),
            timings: None,
            rolled_back: false,
            txn_id: None,
        }
    }

    pub fn from_record(request_id: String, rec: &TransactionRecord) -> Self {
        let exec = rec.execution.as_ref();
        AgentResponse {
            request_id: Some(request_id),
            outcome: Some(rec.outcome),
            exit_code: exec.and_then(|e| e.exit_code),
            stdout_b64: exec.map(|e| STANDARD.encode(&e.stdout.bytes)).unwrap_or_default(),
            stderr_b64: exec.map(|e| STANDARD.encode(&e.stderr.bytes)).unwrap_or_default(),
            stdout_truncated: exec.is_some_and(|e| e.stdout.truncated),
            stderr_truncated: exec.is_some_and(|e| e.stderr.truncated),
            error_code: rec.error.as_ref().map(|e| e.code.as_str().to_string()),
            error_message: rec.error.as_ref().map(|e| e.message.clone()),
            timings: Some(rec.timings),
            rolled_back: rec.rolled_back(),
            txn_id: Some(rec.txn_id.clone()),
        }
    }

    fn from_txn_error(request_id: String, err: TxnError) -> Self {
        match err {
            TxnError::JournalWrite { record, source } => {
                let mut resp = Self::from_record(request_id, &record);
                resp.error_code = Some("JOURNAL_WRITE_FAILED".into());
                resp.error_message = Some(format!("JOURNAL_WRITE_FAILED: {source}"));
                resp
            }
            other => Self::error(Some(request_id), other.code(), other.to_string()),
        }
    }
}

/// One client stream. Responses from any worker are serialized through it.
struct Connection {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Mutex<usize>,
    drained: Condvar,
    broken: AtomicBool,
}

impl Connection {
    fn new(writer: Box<dyn Write + Send>) -> Arc<Self> {
        Arc::new(Connection {
            writer: Mutex::new(writer),
            pending: Mutex::new(0),
            drained: Condvar::new(),
            broken: AtomicBool::new(false),
        })
    }

    fn respond(&self, resp: &AgentResponse) {
        let mut line = serde_json::to_vec(resp).expect("response serializes");
        line.push(b'\n');
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        if w.write_all(&line).and_then(|_| w.flush()).is_err() {
            self.broken.store(true, Ordering::SeqCst);
        }
    }

    fn begin(&self) {
        *self.pending.lock().unwrap_or_else(|p| p.into_inner()) += 1;
    }

    fn finish(&self) {
        let mut n = self.pending.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        if *n == 0 {
            self.drained.notify_all();
        }
    }

    fn wait_idle(&self) {
        let mut n = self.pending.lock().unwrap_or_else(|p| p.into_inner());
        while *n > 0 {
            n = self.drained.wait(n).unwrap_or_else(|p| p.into_inner());
        }
    }
}

struct Job {
    request: AgentRequest,
    conn: Arc<Connection>,
}

struct Slot {
    alias: String,
    root: PathBuf,
    queue: SyncSender<Job>,
    worker: JoinHandle<()>,
}

/// Per-stream counters returned when a stream ends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamSummary {
    pub requests: usize,
    pub responses_expected: usize,
    pub shutdown_requested: bool,
}

pub struct Service {
    slots: Vec<Slot>,
    defaults: ServiceDefaults,
    shutdown: AtomicBool,
}

impl Service {
    /// Loads the policy, opens every registered workspace and starts one
    /// worker per workspace.
    pub fn start(config: &ServiceConfig) -> Result<Service, ServiceError> {
        let policy = match &config.policy {
            Some(path) => PolicySet::from_path(path)?,
            None => PolicySet::default_policy(),
        };
        Self::start_with_policy(config, policy)
    }

    pub fn start_with_policy(config: &ServiceConfig, policy: PolicySet) -> Result<Service, ServiceError> {
        if config.workspaces.is_empty() {
            return Err(ServiceError::NoWorkspaces);
        }
        let policy = Arc::new(policy);
        let defaults = config.defaults.clone();
        let options = WorkspaceOptions {
            compute_digests: defaults.compute_digests,
            default_timeout: Duration::from_millis(defaults.timeout_ms.max(1)),
            default_output_cap: defaults.output_cap.max(1),
        };
        let mut opened = Vec::new();
        for (alias, entry) in &config.workspaces {
            let ws = Workspace::builder(&entry.root, &entry.store_dir)
                .options(options.clone())
                .open()
                .map_err(|source| ServiceError::Workspace {
                    alias: alias.clone(),
                    source,
                })?;
            if ws.is_quarantined() {
                log::warn!("workspace `{alias}` is quarantined; its requests will be refused");
            }
            opened.push((alias.clone(), ws));
        }
        let slots = opened
            .into_iter()
            .map(|(alias, ws)| {
                let (queue, jobs) = sync_channel::<Job>(defaults.queue_depth.max(1));
                let root = ws.root().to_path_buf();
                let policy = policy.clone();
                let worker = thread::Builder::new()
                    .name(format!("ws-{alias}"))
                    .spawn(move || {
                        for job in jobs {
                            let resp = handle(&ws, &policy, job.request);
                            job.conn.respond(&resp);
                            job.conn.finish();
                        }
                    })
                    .expect("spawn worker thread");
                Slot {
                    alias,
                    root,
                    queue,
                    worker,
                }
            })
            .collect();
        Ok(Service {
            slots,
            defaults,
            shutdown: AtomicBool::new(false),
        })
    }

    pub fn aliases(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.alias.as_str()).collect()
    }

    pub fn shutdown_requested(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst)
    }

    fn resolve(&self, workspace: Option<&str>) -> Result<&Slot, AgentResponseError> {
        match workspace {
            None if self.slots.len() == 1 => Ok(&self.slots[0]),
            None => Err(AgentResponseError::unknown(
                "workspace is required when several workspaces are registered",
            )),
            Some(name) => {
                if let Some(slot) = self.slots.iter().find(|s| s.alias == name) {
                    return Ok(slot);
                }
                let path = Path::new(name);
                let canonical = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
                self.slots
                    .iter()
                    .find(|s| s.root == canonical)
                    .ok_or_else(|| AgentResponseError::unknown(format!("no workspace registered as `{name}`")))
            }
        }
    }

    /// Serves one request stream until EOF or a shutdown request, then waits
    /// for every accepted request to be answered.
    pub fn serve_stream<R: BufRead>(
        &self,
        reader: R,
        writer: Box<dyn Write + Send>,
    ) -> Result<StreamSummary, ServiceError> {
        let conn = Connection::new(writer);
        let mut summary = StreamSummary::default();
        let mut seen = HashSet::new();
        let mut result = Ok(());
        for line in reader.lines() {
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    result = Err(ServiceError::Transport(e));
                    break;
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            match parse_line(&line) {
                Parsed::Shutdown => {
                    summary.shutdown_requested = true;
                    self.shutdown.store(true, Ordering::SeqCst);
                    break;
                }
                Parsed::Bad(message) => {
                    summary.requests += 1;
                    conn.respond(&AgentResponse::error(None, "BAD_REQUEST", message));
                }
                Parsed::Request(req) => {
                    summary.requests += 1;
                    summary.responses_expected += 1;
                    if !seen.insert(req.request_id.clone()) {
                        let msg = format!("DUPLICATE_REQUEST_ID: `{}` was already used on this stream", req.request_id);
                        conn.respond(&AgentResponse::error(Some(req.request_id), "DUPLICATE_REQUEST_ID", msg));
                    } else {
                        self.dispatch(req, &conn);
                    }
                }
            }
            if conn.broken.load(Ordering::SeqCst) {
                break;
            }
        }
        conn.wait_idle();
        if conn.broken.load(Ordering::SeqCst) {
            return Err(ServiceError::Transport(io::Error::new(
                io::ErrorKind::BrokenPipe,
                "response stream closed",
            )));
        }
        result.map(|_| summary)
    }

    fn dispatch(&self, req: AgentRequest, conn: &Arc<Connection>) {
        let slot = match self.resolve(req.workspace.as_deref()) {
            Ok(s) => s,
            Err(e) => {
                conn.respond(&AgentResponse::error(Some(req.request_id), e.code, e.message));
                return;
            }
        };
        conn.begin();
        let job = Job {
            request: req,
            conn: conn.clone(),
        };
        if let Err(e) = slot.queue.try_send(job) {
            let (job, why) = match e {
                TrySendError::Full(j) => (j, format!("queue for `{}` is full ({} pending)", slot.alias, self.defaults.queue_depth)),
                TrySendError::Disconnected(j) => (j, format!("worker for `{}` has stopped", slot.alias)),
            };
            conn.respond(&AgentResponse::error(
                Some(job.request.request_id),
                "WORKSPACE_BUSY",
                format!("WORKSPACE_BUSY: {why}"),
            ));
            conn.finish();
        }
    }

    pub fn serve_stdio(&self) -> Result<StreamSummary, ServiceError> {
        let stdin = io::stdin();
        self.serve_stream(stdin.lock(), Box::new(io::stdout()))
    }

    /// Accepts connections on a Unix socket until a client sends a shutdown
    /// request. Each connection is its own request stream.
    pub fn serve_unix(self: &Arc<Self>, path: &Path) -> Result<(), ServiceError> {
        if path.exists() {
            std::fs::remove_file(path)?;
        }
        let listener = UnixListener::bind(path)?;
        let mut clients = Vec::new();
        for stream in listener.incoming() {
            if self.shutdown_requested() {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            let svc = self.clone();
            let wake = path.to_path_buf();
            clients.push(thread::spawn(move || {
                let reader = match stream.try_clone() {
                    Ok(r) => BufReader::new(r),
                    Err(e) => return log::error!("socket clone failed: {e}"),
                };
                match svc.serve_stream(reader, Box::new(stream)) {
                    Ok(s) if s.shutdown_requested => {
                        // Unblock the accept loop.
                        let _ = UnixStream::connect(&wake);
                    }
                    Ok(_) => {}
                    Err(e) => log::warn!("client stream ended: {e}"),
                }
            }));
            clients.retain(|c| !c.is_finished());
        }
        for c in clients {
            let _ = c.join();
        }
        let _ = std::fs::remove_file(path);
        Ok(())
    }

    /// Stops the workers after their queues drain.
    pub fn stop(self) {}
}

impl Drop for Service {
    fn drop(&mut self) {
        for slot in self.slots.drain(..) {
            drop(slot.queue);
            let _ = slot.worker.join();
        }
    }
}

struct AgentResponseError {
    code: &'static str,
    message: String,
}

impl AgentResponseError {
    fn unknown(message: impl Into<String>) -> Self {
        AgentResponseError {
            code: "UNKNOWN_WORKSPACE",
            message: format!("UNKNOWN_WORKSPACE: {}", message.into()),
        }
    }
}

enum Parsed {
    Request(AgentRequest),
    Shutdown,
    Bad(String),
}

fn parse_line(line: &str) -> Parsed {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return Parsed::Bad(format!("BAD_REQUEST: not a JSON object: {e}")),
    };
    if let Some(op) = value.get("op") {
        return match op.as_str() {
            Some("shutdown") => Parsed::Shutdown,
            _ => Parsed::Bad(format!("BAD_REQUEST: unknown op {op}")),
        };
    }
    let req: AgentRequest = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) => return Parsed::Bad(format!("BAD_REQUEST: {e}")),
    };
    if req.command.trim().is_empty() {
        return Parsed::Bad("BAD_REQUEST: command is empty".into());
    }
    if req.timeout_ms == Some(0) {
        return Parsed::Bad("BAD_REQUEST: timeout_ms must be positive".into());
    }
    Parsed::Request(req)
}

fn handle(ws: &Workspace, policy: &PolicySet, req: AgentRequest) -> AgentResponse {
    let id = req.request_id.clone();
    let opts = ExecOptions {
        timeout: req.timeout_ms.map(Duration::from_millis),
        output_cap: None,
        env: req.env.unwrap_or_default(),
    };
    let run = catch_unwind(AssertUnwindSafe(|| ws.run_transaction(&req.command, policy, &opts)));
    match run {
        Ok(Ok(rec)) => AgentResponse::from_record(id, &rec),
        Ok(Err(e)) => AgentResponse::from_txn_error(id, e),
        Err(_) => AgentResponse::error(Some(id), "INTERNAL_ERROR", "INTERNAL_ERROR: transaction panicked"),
    }
}
