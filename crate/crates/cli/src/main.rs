//! `txbox`: run agent commands inside workspace transactions.

mod config;

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{CliConfig, FileConfig, Overrides};
use txbox_core::bench::{
    run_overhead_bench, run_safety_suite_with, builtin_scenarios, load_scenarios, OverheadOptions,
    DEFAULT_ATTEMPTS, DEFAULT_REPETITIONS,
};
use txbox_core::journal::{read_all, JournalRecord};
use txbox_core::policy::{classify_raw, PolicySet};
use txbox_core::service::{Service, ServiceConfig, ServiceError};
use txbox_core::transaction::{
    ExecOptions, Outcome, TransactionRecord, TxnError, Workspace, WorkspaceOptions,
};

const EXIT_OK: u8 = 0;
const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_BLOCKED: u8 = 3;
const EXIT_ROLLED_BACK: u8 = 4;
const EXIT_FATAL: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "txbox", version, about = "Transactional sandbox for agent shell commands")]
struct Cli {
    /// TOML file with default settings.
    #[arg(long, global = true, env = "TXBOX_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,
    /// Workspace root (defaults to the current directory).
    #[arg(long, global = true, env = "TXBOX_WORKSPACE", value_name = "DIR")]
    workspace: Option<PathBuf>,
    /// Snapshot and journal directory for the workspace.
    #[arg(long, global = true, env = "TXBOX_STORE", value_name = "DIR")]
    store: Option<PathBuf>,
    /// Policy file (TOML). The built-in policy is used when unset.
    #[arg(long, global = true, env = "TXBOX_POLICY", value_name = "FILE")]
    policy: Option<PathBuf>,
    #[arg(long, global = true, env = "TXBOX_TIMEOUT_MS", value_name = "MS")]
    timeout_ms: Option<u64>,
    /// Per-stream output capture limit in bytes.
    #[arg(long, global = true, env = "TXBOX_OUTPUT_CAP", value_name = "BYTES")]
    output_cap: Option<usize>,
    /// off, error, warn, info, debug or trace. Logs go to stderr.
    #[arg(long, global = true, env = "TXBOX_LOG", value_name = "LEVEL")]
    log_level: Option<String>,
    /// Print one JSON document on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a command as a transaction on the workspace.
    Run(RunArgs),
    /// Classify a command without running it.
    PolicyCheck {
        #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
        command: Vec<String>,
    },
    /// List or summarize journaled transactions.
    Journal(JournalArgs),
    /// Serve agent requests as JSON lines.
    Serve(ServeArgs),
    /// Add a workspace alias to a service config file.
    Register {
        #[arg(long, value_name = "FILE")]
        service_config: PathBuf,
        alias: String,
        /// Defaults to the configured workspace.
        root: Option<PathBuf>,
    },
    /// Safety and overhead benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Lift a quarantine after inspecting the workspace.
    ResetQuarantine {
        /// Operator acknowledgement recorded in the journal.
        #[arg(long)]
        ack: String,
    },
    /// Print the resolved settings.
    Config,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Extra environment for the command, as KEY=VALUE.
    #[arg(long = "env", value_name = "KEY=VALUE", value_parser = parse_env_pair)]
    env: Vec<(String, String)>,
    /// A single argument is taken as shell text; several are quoted and joined.
    #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
    command: Vec<String>,
}

#[derive(Debug, Args)]
struct JournalArgs {
    #[arg(long, value_parser = parse_outcome)]
    outcome: Option<Outcome>,
    /// RFC 3339 timestamp or YYYY-MM-DD.
    #[arg(long, value_parser = parse_time)]
    since: Option<DateTime<Utc>>,
    #[arg(long, value_parser = parse_time)]
    until: Option<DateTime<Utc>>,
    /// Show only the last N matching entries.
    #[arg(long)]
    limit: Option<usize>,
    /// Count transactions per outcome.
    #[arg(long)]
    stats: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Read requests from stdin and answer on stdout (the default).
    #[arg(long, conflicts_with = "socket")]
    stdio: bool,
    /// Listen on a Unix socket instead.
    #[arg(long, value_name = "PATH")]
    socket: Option<PathBuf>,
    /// Multi-workspace service config. Without it the configured workspace
    /// is served under the alias `default`.
    #[arg(long, value_name = "FILE")]
    service_config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    /// Run every scenario category and report success rates.
    Safety {
        #[arg(long, default_value_t = DEFAULT_ATTEMPTS)]
        attempts: usize,
        /// Directory of scenario manifests instead of the built-in suite.
        #[arg(long, value_name = "DIR")]
        scenarios: Option<PathBuf>,
        /// Do not append the attempts to the workspace journal.
        #[arg(long)]
        no_journal: bool,
    },
    /// Time a command bare and inside a transaction on generated workspaces.
    Overhead {
        /// Workspace size in MiB; repeat for several sizes.
        #[arg(long = "size-mb", default_values_t = [10u64, 50, 100])]
        sizes: Vec<u64>,
        #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
        repetitions: usize,
        #[arg(long, default_value = "sh -c true")]
        command: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        work_dir: Option<PathBuf>,
    },
}

fn parse_env_pair(text: &str) -> Result<(String, String), String> {
    match text.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected KEY=VALUE, got `{text}`")),
    }
}

fn parse_outcome(text: &str) -> Result<Outcome, String> {
    Outcome::parse(text).ok_or_else(|| {
        let all: Vec<&str> = Outcome::ALL.iter().map(|o| o.as_str()).collect();
        format!("unknown outcome `{text}` (one of {})", all.join(", "))
    })
}

fn parse_time(text: &str) -> Result<DateTime<Utc>, String> {
    if let Ok(t) = DateTime::parse_from_rfc3339(text) {
        return Ok(t.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(text, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
        .map_err(|_| format!("`{text}` is neither RFC 3339 nor YYYY-MM-DD"))
}

/// A failure with the exit status it maps to.
struct Failure {
    status: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Failure {
            status: EXIT_USAGE,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        Failure {
            status: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

impl From<TxnError> for Failure {
    fn from(e: TxnError) -> Self {
        match e {
            TxnError::Parse(_) | TxnError::InvalidRoot { .. } => Failure::usage(e),
            _ => Failure::runtime(e),
        }
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    let resolved = cli
        .config
        .as_deref()
        .map(FileConfig::load)
        .unwrap_or_else(|| Ok(FileConfig::default()))
        .and_then(|file| {
            CliConfig::resolve(
                file,
                Overrides {
                    workspace: cli.workspace,
                    store: cli.store,
                    policy: cli.policy,
                    timeout_ms: cli.timeout_ms,
                    output_cap: cli.output_cap,
                    log_level: cli.log_level,
                },
            )
        });
    let cfg = match resolved {
        Ok(c) => c,
        Err(e) => return report(json, Failure::usage(format!("CONFIG_ERROR: {e}"))),
    };
    env_logger::Builder::new()
        .filter_level(cfg.level())
        .target(env_logger::Target::Stderr)
        .init();
    log::debug!("settings: {cfg:?}");

    let result = match cli.command {
        Command::Run(args) => cmd_run(&cfg, json, args),
        Command::PolicyCheck { command } => cmd_policy_check(&cfg, json, &command),
        Command::Journal(args) => cmd_journal(&cfg, json, args),
        Command::Serve(args) => cmd_serve(&cfg, args),
        Command::Register {
            service_config,
            alias,
            root,
        } => cmd_register(&cfg, json, &service_config, &alias, root),
        Command::Bench(b) => cmd_bench(&cfg, json, b),
        Command::ResetQuarantine { ack } => cmd_reset(&cfg, json, &ack),
        Command::Config => print_json_or(json, &cfg, || {
            toml::to_string_pretty(&cfg).unwrap_or_else(|e| format!("# {e}\n"))
        }),
    };
    match result {
        Ok(status) => ExitCode::from(status),
        Err(f) => report(json, f),
    }
}

fn report(json: bool, f: Failure) -> ExitCode {
    let code = f.message.split(':').next().unwrap_or("ERROR");
    if json {
        let doc = json!({"error": {"code": code, "message": f.message}});
        let _ = writeln!(io::stdout(), "{doc}");
    }
    let _ = writeln!(io::stderr(), "txbox: {}", f.message);
    ExitCode::from(f.status)
}

fn print_json_or<T: serde::Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> CmdResult {
    let mut out = io::stdout().lock();
    let written = if json {
        serde_json::to_writer_pretty(&mut out, value)
            .map_err(io::Error::from)
            .and_then(|_| writeln!(out))
    } else {
        out.write_all(text().as_bytes())
    };
    written.map_err(|e| Failure::runtime(format!("IO_ERROR: stdout: {e}")))?;
    Ok(EXIT_OK)
}

fn load_policy(cfg: &CliConfig) -> Result<PolicySet, Failure> {
    cfg.load_policy().map_err(Failure::usage)
}

fn open_workspace(cfg: &CliConfig) -> Result<Workspace, Failure> {
    let options = WorkspaceOptions {
        compute_digests: true,
        default_timeout: cfg.timeout(),
        default_output_cap: cfg.output_cap,
    };
    Ok(Workspace::builder(&cfg.workspace_root, &cfg.store_dir)
        .options(options)
        .open()?)
}

fn join_command(words: &[String]) -> Result<String, Failure> {
    match words {
        [one] => Ok(one.clone()),
        many => shlex::try_join(many.iter().map(String::as_str))
            .map_err(|e| Failure::usage(format!("PARSE_ERROR: cannot quote command: {e}"))),
    }
}

fn outcome_status(outcome: Outcome) -> u8 {
    match outcome {
        Outcome::ExecutedSafe | Outcome::Committed => EXIT_OK,
        Outcome::Blocked => EXIT_BLOCKED,
        Outcome::RolledBack => EXIT_ROLLED_BACK,
        Outcome::Fatal => EXIT_FATAL,
    }
}

fn cmd_run(cfg: &CliConfig, json: bool, args: RunArgs) -> CmdResult {
    let raw = join_command(&args.command)?;
    let policy = load_policy(cfg)?;
    let ws = open_workspace(cfg)?;
    let opts = ExecOptions {
        timeout: Some(cfg.timeout()),
        output_cap: Some(cfg.output_cap),
        env: args.env.into_iter().collect::<BTreeMap<_, _>>(),
    };
    let rec = match ws.run_transaction(&raw, &policy, &opts) {
        Ok(r) => r,
        Err(TxnError::JournalWrite { record, source }) => {
            // The workspace is in its final state; say what happened even
            // though the journal missed it.
            print_record(json, &record)?;
            return Err(Failure::runtime(format!("JOURNAL_WRITE_FAILED: {source}")));
        }
        Err(e) => return Err(e.into()),
    };
    print_record(json, &rec)?;
    Ok(outcome_status(rec.outcome))
}

fn print_record(json: bool, rec: &TransactionRecord) -> Result<(), Failure> {
    let io_fail = |e: io::Error| Failure::runtime(format!("IO_ERROR: {e}"));
    if json {
        let mut out = io::stdout().lock();
        serde_json::to_writer_pretty(&mut out, rec).map_err(|e| io_fail(e.into()))?;
        writeln!(out).map_err(io_fail)?;
        return Ok(());
    }
    if let Some(exec) = &rec.execution {
        io::stdout().write_all(&exec.stdout.bytes).map_err(io_fail)?;
        io::stdout().flush().map_err(io_fail)?;
        io::stderr().write_all(&exec.stderr.bytes).map_err(io_fail)?;
    }
    let mut line = format!(
        "txbox: {} ({}, {:.1} ms, txn {})",
        rec.outcome,
        rec.decision.class,
        rec.timings.total_ms,
        rec.txn_id
    );
    if let Some(exec) = &rec.execution {
        match (exec.exit_code, exec.terminated_by_signal, exec.timed_out) {
            (_, _, true) => line.push_str(" timed out"),
            (Some(c), _, _) => line.push_str(&format!(" exit {c}")),
            (None, Some(s), _) => line.push_str(&format!(" signal {s}")),
            _ => {}
        }
        if exec.stdout.truncated || exec.stderr.truncated {
            line.push_str(" [output truncated]");
        }
    }
    eprintln!("{line}");
    if let Some(err) = &rec.error {
        eprintln!("txbox: {}", err.message);
    }
    Ok(())
}

fn cmd_policy_check(cfg: &CliConfig, json: bool, words: &[String]) -> CmdResult {
    let raw = join_command(words)?;
    let policy = load_policy(cfg)?;
    let (cmd, decision) =
        classify_raw(&raw, &policy).map_err(|e| Failure::usage(format!("PARSE_ERROR: {e}")))?;
    let doc = json!({"command": cmd, "decision": decision, "policy_version": policy.version()});
    print_json_or(json, &doc, || {
        let mut text = format!("{}\n", decision.class);
        for (seg, d) in cmd.segments.iter().zip(&decision.per_segment) {
            text.push_str(&format!(
                "  [{}] {:<9} {:<24} {}",
                d.index,
                d.class.as_str(),
                d.rule_id.as_deref().unwrap_or("-"),
                seg.to_shell()
            ));
            if let Some(note) = &d.note {
                text.push_str(&format!("  ({note})"));
            }
            text.push('\n');
        }
        for w in &cmd.parse_warnings {
            text.push_str(&format!("  warning: {w}\n"));
        }
        text
    })
}

fn cmd_journal(cfg: &CliConfig, json: bool, args: JournalArgs) -> CmdResult {
    let path = cfg.store_dir.join(txbox_core::journal::JOURNAL_FILE);
    if !path.exists() {
        return Err(Failure::usage(format!(
            "NO_JOURNAL: {} does not exist",
            path.display()
        )));
    }
    let contents = read_all::<JournalRecord>(&path).map_err(Failure::runtime)?;
    if let Some(w) = &contents.warning {
        eprintln!("txbox: warning: {}: {w:?}", w.code());
    }
    let keep = |r: &JournalRecord| {
        let (at, outcome) = match r {
            JournalRecord::Transaction(t) => (t.started_at, Some(t.outcome)),
            JournalRecord::QuarantineReset { at, .. } => (*at, None),
        };
        args.outcome.is_none_or(|o| outcome == Some(o))
            && args.since.is_none_or(|s| at >= s)
            && args.until.is_none_or(|u| at <= u)
    };
    let mut entries: Vec<_> = contents.entries.iter().filter(|e| keep(&e.record)).collect();
    if let Some(n) = args.limit {
        let skip = entries.len().saturating_sub(n);
        entries.drain(..skip);
    }

    if args.stats {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &entries {
            if let Some(t) = e.record.as_transaction() {
                *counts.entry(t.outcome.as_str()).or_default() += 1;
            }
        }
        let total: usize = counts.values().sum();
        let doc = json!({"counts": counts, "total": total});
        return print_json_or(json, &doc, || {
            let mut text = String::new();
            for o in Outcome::ALL {
                if let Some(n) = counts.get(o.as_str()) {
                    text.push_str(&format!("{:<14}{n:>8}\n", o.as_str()));
                }
            }
            text.push_str(&format!("{:<14}{total:>8}\n", "TOTAL"));
            text
        });
    }

    let docs: Vec<_> = entries
        .iter()
        .map(|e| json!({"seq": e.seq, "checksum": e.checksum, "record": e.record}))
        .collect();
    let doc = json!({
        "entries": docs,
        "warning": contents.warning.as_ref().map(|w| w.code()),
    });
    print_json_or(json, &doc, || {
        if entries.is_empty() {
            return "0 entries\n".to_string();
        }
        let mut text = String::new();
        for e in &entries {
            let line = match &e.record {
                JournalRecord::Transaction(t) => format!(
                    "{:>6}  {}  {:<13} {:>9.1} ms  {}",
                    e.seq,
                    t.started_at.format("%Y-%m-%dT%H:%M:%SZ"),
                    t.outcome.as_str(),
                    t.timings.total_ms,
                    t.command_raw
                ),
                JournalRecord::QuarantineReset {
                    at,
                    operator_ack,
                    discarded_snapshots,
                } => format!(
                    "{:>6}  {}  QUARANTINE_RESET  {} snapshot(s) discarded: {operator_ack}",
                    e.seq,
                    at.format("%Y-%m-%dT%H:%M:%SZ"),
                    discarded_snapshots.len()
                ),
            };
            text.push_str(&line);
            text.push('\n');
        }
        text
    })
}

fn cmd_serve(cfg: &CliConfig, args: ServeArgs) -> CmdResult {
    let mut service_cfg = match &args.service_config {
        Some(path) => ServiceConfig::load(path).map_err(Failure::usage)?,
        None => {
            let mut c = ServiceConfig::default();
            c.register_workspace("default", &cfg.workspace_root, &cfg.store_dir)
                .map_err(Failure::usage)?;
            c.defaults.timeout_ms = cfg.timeout_ms;
            c.defaults.output_cap = cfg.output_cap;
            c
        }
    };
    if service_cfg.policy.is_none() {
        service_cfg.policy = cfg.policy_path.clone();
    }
    let service = Service::start(&service_cfg).map_err(|e| match e {
        ServiceError::Config { .. }
        | ServiceError::Policy(_)
        | ServiceError::InvalidRoot { .. }
        | ServiceError::NoWorkspaces => Failure::usage(e),
        _ => Failure::runtime(e),
    })?;
    log::info!("serving workspaces: {}", service.aliases().join(", "));
    match &args.socket {
        Some(path) => {
            let service = Arc::new(service);
            service.serve_unix(path).map_err(Failure::runtime)?;
        }
        None => {
            let summary = service.serve_stdio().map_err(Failure::runtime)?;
            log::info!(
                "stream closed after {} request(s){}",
                summary.requests,
                if summary.shutdown_requested { " (shutdown)" } else { "" }
            );
        }
    }
    Ok(EXIT_OK)
}

fn cmd_register(
    cfg: &CliConfig,
    json: bool,
    service_config: &std::path::Path,
    alias: &str,
    root: Option<PathBuf>,
) -> CmdResult {
    let root = root.unwrap_or_else(|| cfg.workspace_root.clone());
    let store = txbox_core::transaction::default_store_dir(&root);
    txbox_core::service::register_workspace(service_config, alias, &root, &store).map_err(|e| {
        match e.code() {
            "IO_ERROR" | "TRANSPORT_ERROR" => Failure::runtime(e),
            _ => Failure::usage(e),
        }
    })?;
    let doc = json!({"alias": alias, "root": root, "store_dir": store});
    print_json_or(json, &doc, || format!("registered `{alias}` -> {}\n", root.display()))
}

fn cmd_reset(cfg: &CliConfig, json: bool, ack: &str) -> CmdResult {
    if ack.trim().is_empty() {
        return Err(Failure::usage("--ack must not be empty"));
    }
    let ws = open_workspace(cfg)?;
    ws.reset_quarantine(ack)?;
    let doc = json!({"workspace": ws.root(), "quarantined": false});
    print_json_or(json, &doc, || format!("quarantine lifted on {}\n", ws.root().display()))
}

fn cmd_bench(cfg: &CliConfig, json: bool, cmd: BenchCommand) -> CmdResult {
    let policy = load_policy(cfg)?;
    match cmd {
        BenchCommand::Safety {
            attempts,
            scenarios,
            no_journal,
        } => {
            if attempts == 0 {
                return Err(Failure::usage("--attempts must be positive"));
            }
            let suite = match &scenarios {
                Some(dir) => load_scenarios(dir).map_err(Failure::usage)?,
                None => builtin_scenarios(),
            };
            let ws = if no_journal { None } else { Some(open_workspace(cfg)?) };
            let mut journal_err = None;
            let mut sink = |rec: &TransactionRecord| {
                if let (Some(ws), None) = (&ws, &journal_err) {
                    if let Err(e) = ws.journal_record(rec) {
                        journal_err = Some(e);
                    }
                }
            };
            let report = run_safety_suite_with(&suite, &policy, attempts, &mut sink)
                .map_err(Failure::runtime)?;
            if let Some(e) = journal_err {
                return Err(Failure::runtime(e));
            }
            print_json_or(json, &report, || {
                let mut text = format!(
                    "{:<18}{:<15}{:>10}{:>10}\n",
                    "CATEGORY", "EXPECTED", "PASSED", "RATE"
                );
                for c in &report.categories {
                    text.push_str(&format!(
                        "{:<18}{:<15}{:>10}{:>9.1}%\n",
                        c.category.as_str(),
                        c.expected_outcome.as_str(),
                        format!("{}/{}", c.successes, c.attempts),
                        100.0 * c.success_rate
                    ));
                }
                for f in &report.failures {
                    text.push_str(&format!(
                        "FAILED {} attempt {}: expected {}, got {}: {}\n",
                        f.scenario,
                        f.attempt,
                        f.expected,
                        f.actual.map(|o| o.as_str()).unwrap_or("no outcome"),
                        f.reason
                    ));
                }
                text
            })?;
            Ok(if report.all_passed() { EXIT_OK } else { EXIT_RUNTIME })
        }
        BenchCommand::Overhead {
            sizes,
            repetitions,
            command,
            seed,
            work_dir,
        } => {
            let bytes: Vec<u64> = sizes.iter().map(|mb| mb << 20).collect();
            let opts = OverheadOptions {
                repetitions,
                seed,
                work_dir,
                exec: ExecOptions {
                    timeout: Some(cfg.timeout().max(Duration::from_secs(1))),
                    output_cap: Some(cfg.output_cap),
                    env: BTreeMap::new(),
                },
                ..OverheadOptions::default()
            };
            let reports = run_overhead_bench(&command, &bytes, &policy, &opts).map_err(|e| {
                match e.code() {
                    "MISCONFIGURED_BENCH" | "INVALID_ARGUMENT" => Failure::usage(e),
                    _ => Failure::runtime(e),
                }
            })?;
            print_json_or(json, &reports, || {
                let mut text = format!(
                    "{:>8}{:>7}{:>13}{:>13}{:>13}{:>11}{:>10}{:>7}\n",
                    "SIZE_MB", "FILES", "BASELINE_MS", "SANDBOX_MS", "OVERHEAD_MS", "OVERHEAD%", "SNAP_SHR", "REGEN"
                );
                for r in &reports {
                    text.push_str(&format!(
                        "{:>8}{:>7}{:>13.2}{:>13.2}{:>13.2}{:>11.1}{:>10.2}{:>7}\n",
                        r.workspace_size_bytes >> 20,
                        r.file_count,
                        r.mean_baseline,
                        r.mean_sandboxed,
                        r.overhead_ms,
                        r.overhead_pct,
                        r.snapshot_share,
                        r.regenerations
                    ));
                }
                text
            })
        }
    }
}
