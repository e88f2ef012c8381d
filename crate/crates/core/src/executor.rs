//! Child process execution with captured output and a hard timeout.
//!
//! Commands run in their own session (and therefore their own process group)
//! with stdin attached to `/dev/null` and no controlling terminal, so anything
//! that tries to prompt fails immediately instead of waiting for a human.
//!
//! The child environment is exactly the base variables `PATH`, `HOME` and
//! `LANG` (taken from this process, with fallbacks) overlaid with the
//! request's `env` map. Nothing else is inherited.

use std::collections::BTreeMap;
use std::io::{self, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::PathBuf;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_OUTPUT_CAP: usize = 1024 * 1024;
/// Time between SIGTERM and SIGKILL when a command times out.
pub const KILL_GRACE: Duration = Duration::from_secs(2);

const FALLBACK_PATH: &str = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";
const SHELL: &str = "/bin/sh";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum CommandSpec {
    /// Passed to `/bin/sh -c`.
    Shell(String),
    /// Spawned directly; `argv[0]` is resolved through `PATH`.
    Argv(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct ExecutionRequest {
    pub command: CommandSpec,
    pub cwd: PathBuf,
    pub env: BTreeMap<String, String>,
    pub timeout: Duration,
    pub output_cap: usize,
}

impl ExecutionRequest {
    pub fn shell(raw: impl Into<String>, cwd: impl Into<PathBuf>) -> Self {
        ExecutionRequest {
            command: CommandSpec::Shell(raw.into()),
            cwd: cwd.into(),
            env: BTreeMap::new(),
            timeout: DEFAULT_TIMEOUT,
            output_cap: DEFAULT_OUTPUT_CAP,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_output_cap(mut self, cap: usize) -> Self {
        self.output_cap = cap;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturedOutput {
    #[serde(with = "crate::b64")]
    pub bytes: Vec<u8>,
    pub truncated: bool,
}

impl CapturedOutput {
    pub fn lossy(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit_code: Option<i32>,
    pub terminated_by_signal: Option<i32>,
    pub timed_out: bool,
    pub stdout: CapturedOutput,
    pub stderr: CapturedOutput,
    #[serde(with = "crate::millis")]
    pub wall_time: Duration,
}

impl ExecutionResult {
    /// Exit code zero, no signal, no timeout.
    pub fn succeeded(&self) -> bool {
        self.exit_code == Some(0) && !self.timed_out && self.terminated_by_signal.is_none()
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("SPAWN_FAILED: could not start `{program}`: {source}")]
    SpawnFailed {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("INVALID_CWD: {0} is not a directory")]
    InvalidCwd(PathBuf),
    #[error("INVALID_REQUEST: {0}")]
    InvalidRequest(String),
    #[error("IO_ERROR: {0}")]
    Io(#[from] io::Error),
}

impl ExecError {
    pub fn code(&self) -> &'static str {
        match self {
            ExecError::SpawnFailed { .. } => "SPAWN_FAILED",
            ExecError::InvalidCwd(_) => "INVALID_CWD",
            ExecError::InvalidRequest(_) => "INVALID_REQUEST",
            ExecError::Io(_) => "IO_ERROR",
        }
    }
}

/// Runs a command. Implementations must be reentrant.
pub trait Executor: Send + Sync {
    fn execute(&self, req: &ExecutionRequest) -> Result<ExecutionResult, ExecError>;
}

/// Spawns real child processes.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProcessExecutor;

impl Executor for ProcessExecutor {
    fn execute(&self, req: &ExecutionRequest) -> Result<ExecutionResult, ExecError> {
        execute(req)
    }
}

/// The fixed part of every child environment.
pub fn base_env() -> BTreeMap<String, String> {
    let mut env = BTreeMap::new();
    env.insert(
        "PATH".to_string(),
        std::env::var("PATH").unwrap_or_else(|_| FALLBACK_PATH.to_string()),
    );
    env.insert(
        "HOME".to_string(),
        std::env::var("HOME").unwrap_or_else(|_| "/".to_string()),
    );
    env.insert(
        "LANG".to_string(),
        std::env::var("LANG").unwrap_or_else(|_| "C.UTF-8".to_string()),
    );
    env
}

fn validate(req: &ExecutionRequest) -> Result<(), ExecError> {
    if req.timeout.is_zero() {
        return Err(ExecError::InvalidRequest("timeout must be positive".into()));
    }
    if req.output_cap == 0 {
        return Err(ExecError::InvalidRequest("output_cap must be positive".into()));
    }
    if let CommandSpec::Argv(argv) = &req.command {
        if argv.is_empty() {
            return Err(ExecError::InvalidRequest("argv is empty".into()));
        }
    }
    if !req.cwd.is_dir() {
        return Err(ExecError::InvalidCwd(req.cwd.clone()));
    }
    Ok(())
}

/// Runs the request to completion and reaps the child.
pub fn execute(req: &ExecutionRequest) -> Result<ExecutionResult, ExecError> {
    validate(req)?;
    let (mut cmd, program) = match &req.command {
        CommandSpec::Shell(raw) => {
            let mut c = Command::new(SHELL);
            c.arg("-c").arg(raw);
            (c, SHELL.to_string())
        }
        CommandSpec::Argv(argv) => {
            let mut c = Command::new(&argv[0]);
            c.args(&argv[1..]);
            (c, argv[0].clone())
        }
    };
    let mut env = base_env();
    env.extend(req.env.iter().map(|(k, v)| (k.clone(), v.clone())));
    cmd.current_dir(&req.cwd)
        .env_clear()
        .envs(&env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    // SAFETY: setsid is async-signal-safe and touches no parent state.
    unsafe {
        cmd.pre_exec(|| {
            if libc::setsid() == -1 {
                return Err(io::Error::last_os_error());
            }
            Ok(())
        });
    }

    let started = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|source| ExecError::SpawnFailed { program, source })?;
    let pgid = child.id() as libc::pid_t;

    let cap = req.output_cap;
    let out = child.stdout.take().expect("stdout piped");
    let err = child.stderr.take().expect("stderr piped");
    let out_reader = thread::spawn(move || drain(out, cap));
    let err_reader = thread::spawn(move || drain(err, cap));

    let deadline = started + req.timeout;
    let (status, timed_out) = match wait_until(&mut child, deadline)? {
        Some(status) => (status, false),
        None => {
            signal_group(pgid, libc::SIGTERM);
            let status = match wait_until(&mut child, Instant::now() + KILL_GRACE)? {
                Some(s) => s,
                None => {
                    signal_group(pgid, libc::SIGKILL);
                    child.wait()?
                }
            };
            (status, true)
        }
    };
    let wall_time = started.elapsed();
    // Whatever the leader left behind in its group does not outlive the call.
    signal_group(pgid, libc::SIGKILL);

    let stdout = out_reader.join().expect("stdout reader panicked")?;
    let stderr = err_reader.join().expect("stderr reader panicked")?;
    let (exit_code, terminated_by_signal) = if timed_out {
        (None, None)
    } else {
        split_status(status)
    };
    Ok(ExecutionResult {
        exit_code,
        terminated_by_signal,
        timed_out,
        stdout,
        stderr,
        wall_time,
    })
}

fn split_status(status: ExitStatus) -> (Option<i32>, Option<i32>) {
    match status.code() {
        Some(code) => (Some(code), None),
        None => (None, status.signal()),
    }
}

fn wait_until(child: &mut Child, deadline: Instant) -> io::Result<Option<ExitStatus>> {
    let mut pause = Duration::from_micros(200);
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(Some(status));
        }
        let now = Instant::now();
        if now >= deadline {
            return Ok(None);
        }
        thread::sleep(pause.min(deadline - now));
        pause = (pause * 2).min(Duration::from_millis(10));
    }
}

fn signal_group(pgid: libc::pid_t, signal: libc::c_int) {
    // ESRCH (group already gone) is the common case and not an error.
    unsafe {
        libc::killpg(pgid, signal);
    }
}

fn drain(mut reader: impl Read, cap: usize) -> io::Result<CapturedOutput> {
    let mut out = CapturedOutput::default();
    let mut chunk = vec![0u8; 64 * 1024];
    loop {
        let n = match reader.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        let room = cap.saturating_sub(out.bytes.len());
        if n > room {
            out.truncated = true;
        }
        out.bytes.extend_from_slice(&chunk[..n.min(room)]);
    }
    Ok(out)
}
