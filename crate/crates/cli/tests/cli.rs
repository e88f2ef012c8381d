use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

struct Env {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    store: std::path::PathBuf,
}

impl Env {
    fn new() -> Env {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ws");
        let store = dir.path().join("store");
        fs::create_dir(&root).unwrap();
        Env { _dir: dir, root, store }
    }

    fn cmd(&self) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_txbox"));
        c.env_remove("TXBOX_CONFIG")
            .env_remove("TXBOX_POLICY")
            .env_remove("TXBOX_TIMEOUT_MS")
            .env_remove("TXBOX_OUTPUT_CAP")
            .env_remove("TXBOX_LOG")
            .env("TXBOX_WORKSPACE", &self.root)
            .env("TXBOX_STORE", &self.store)
            .stdin(Stdio::null());
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd().args(args).output().unwrap()
    }
}

fn status(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn exit_status_per_outcome() {
    let env = Env::new();
    assert_eq!(status(&env.run(&["run", "ls"])), 0);
    assert_eq!(status(&env.run(&["run", "rm -rf /"])), 3);
    assert_eq!(status(&env.run(&["run", "echo x > f; exit 2"])), 4);
    assert!(!env.root.join("f").exists());
    assert_eq!(status(&env.run(&["run", "echo x > g"])), 0);
    assert!(env.root.join("g").exists());
    assert_eq!(status(&env.run(&["run", "echo 'open"])), 2);
}

#[test]
fn run_passes_output_through_and_json_is_one_document() {
    let env = Env::new();
    let o = env.run(&["run", "echo out; echo err >&2"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout), "out\n");
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("err\n"), "{err}");
    assert!(err.contains("EXECUTED_SAFE"), "{err}");

    let o = env.run(&["--json", "run", "echo", "two words"]);
    let doc = json(&o);
    assert_eq!(doc["outcome"], "EXECUTED_SAFE");
    assert_eq!(doc["command_raw"], "echo 'two words'");
    assert_eq!(doc["execution"]["exit_code"], 0);
}

#[test]
fn run_env_reaches_the_command() {
    let env = Env::new();
    let o = env.run(&["run", "--env", "GREETING=hey", "printenv GREETING > g.txt"]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(env.root.join("g.txt")).unwrap(), "hey\n");
    assert_eq!(status(&env.run(&["run", "--env", "=bad", "true"])), 2);
}

#[test]
fn policy_check_reports_segments() {
    let env = Env::new();
    let o = env.run(&["policy-check", "ls | grep a && rm -rf /"]);
    assert_eq!(status(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "UNSAFE");
    assert_eq!(lines.len(), 4);
    let doc = json(&env.run(&["--json", "policy-check", "git status"]));
    assert_eq!(doc["decision"]["class"], "SAFE");
    assert_eq!(status(&env.run(&["policy-check", "   "])), 2);
}

#[test]
fn bad_policy_file_is_a_usage_error() {
    let env = Env::new();
    let policy = env.root.join("policy.toml");
    fs::write(&policy, "this is = = not toml").unwrap();
    let o = env.run(&["--policy", policy.to_str().unwrap(), "policy-check", "ls"]);
    assert_eq!(status(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("POLICY_PARSE_ERROR"));
}

#[test]
fn journal_listing_filters_and_stats() {
    let env = Env::new();
    let o = env.run(&["journal"]);
    assert_eq!(status(&o), 2, "missing journal");

    env.run(&["run", "ls"]);
    env.run(&["run", "rm -rf /"]);
    env.run(&["run", "touch a"]);
    env.run(&["run", "touch b; false"]);
    let o = env.run(&["journal"]);
    assert_eq!(status(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 4);

    let doc = json(&env.run(&["--json", "journal", "--outcome", "BLOCKED"]));
    let entries = doc["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0]["seq"], 2);

    let doc = json(&env.run(&["--json", "journal", "--stats"]));
    assert_eq!(doc["total"], 4);
    assert_eq!(doc["counts"]["ROLLED_BACK"], 1);
    let o = env.run(&["journal", "--stats"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(!text.contains("FATAL"), "zero rows are omitted: {text}");

    let o = env.run(&["journal", "--since", "2999-01-01"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout), "0 entries\n");
    let doc = json(&env.run(&["--json", "journal", "--limit", "1"]));
    assert_eq!(doc["entries"][0]["seq"], 4);
    assert_eq!(status(&env.run(&["journal", "--outcome", "SOMETIMES"])), 2);
}

#[test]
fn flags_override_environment_and_config_file() {
    let env = Env::new();
    let cfg = env.root.join("txbox.toml");
    fs::write(&cfg, "timeout_ms = 1111\noutput_cap = 77\n").unwrap();
    let doc = json(
        &env.cmd()
            .args(["--config", cfg.to_str().unwrap(), "--json", "config"])
            .env("TXBOX_TIMEOUT_MS", "2222")
            .output()
            .unwrap(),
    );
    assert_eq!(doc["timeout_ms"], 2222);
    assert_eq!(doc["output_cap"], 77);
    let doc = json(
        &env.cmd()
            .args(["--config", cfg.to_str().unwrap(), "--timeout-ms", "3333", "--json", "config"])
            .env("TXBOX_TIMEOUT_MS", "2222")
            .output()
            .unwrap(),
    );
    assert_eq!(doc["timeout_ms"], 3333);
    assert_eq!(doc["store_dir"], env.store.to_str().unwrap());

    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(status(&env.run(&["--config", cfg.to_str().unwrap(), "config"])), 2);
}

#[test]
fn timeout_flag_bounds_commands() {
    let env = Env::new();
    let o = env.run(&["--timeout-ms", "300", "--json", "run", "touch t; sleep 30"]);
    assert_eq!(status(&o), 4);
    let doc = json(&o);
    assert_eq!(doc["execution"]["timed_out"], true);
    assert!(!env.root.join("t").exists());
}

#[test]
fn busy_workspace_is_a_runtime_error() {
    let env = Env::new();
    let mut slow = env.cmd().args(["run", "sleep 2; touch s"]).spawn().unwrap();
    // Wait for the first process to take the lock.
    let lock = env.store.join(".lock");
    for _ in 0..200 {
        if lock.exists() {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(10));
    }
    let o = env.run(&["run", "touch other"]);
    assert_eq!(status(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("WORKSPACE_BUSY"));
    assert!(slow.wait().unwrap().success());
}

#[test]
fn serve_stdio_answers_each_request() {
    let env = Env::new();
    let mut child = env
        .cmd()
        .args(["serve", "--stdio"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        writeln!(stdin, r#"{{"request_id":"a","workspace":"default","command":"touch made"}}"#).unwrap();
        writeln!(stdin, r#"{{"request_id":"b","workspace":"nope","command":"ls"}}"#).unwrap();
        writeln!(stdin, "not json").unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let responses: Vec<Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(responses.len(), 3);
    let by_id = |id: &str| responses.iter().find(|r| r["request_id"] == id).unwrap();
    assert_eq!(by_id("a")["outcome"], "COMMITTED");
    assert_eq!(by_id("b")["error_code"], "UNKNOWN_WORKSPACE");
    assert!(responses.iter().any(|r| r["error_code"] == "BAD_REQUEST"));
    assert!(env.root.join("made").exists());
}

#[test]
fn register_then_serve_from_service_config() {
    let env = Env::new();
    let svc = env.root.parent().unwrap().join("service.toml");
    let svc = svc.to_str().unwrap();
    let o = env.run(&["register", "--service-config", svc, "proj"]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(status(&env.run(&["register", "--service-config", svc, "proj"])), 2);
    let mut child = env
        .cmd()
        .args(["serve", "--service-config", svc])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    writeln!(
        child.stdin.take().unwrap(),
        r#"{{"request_id":"1","workspace":"proj","command":"false"}}"#
    )
    .unwrap();
    let out = child.wait_with_output().unwrap();
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["outcome"], "ROLLED_BACK");
    assert_eq!(r["rolled_back"], true);
}

#[test]
fn quarantine_reset_requires_a_quarantine() {
    let env = Env::new();
    let o = env.run(&["reset-quarantine", "--ack", "checked by hand"]);
    assert_eq!(status(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("NOT_QUARANTINED"));
    assert_eq!(status(&env.run(&["reset-quarantine", "--ack", " "])), 2);
}

#[test]
fn bench_safety_journals_every_attempt() {
    let env = Env::new();
    let o = env.run(&["--json", "bench", "safety", "--attempts", "2"]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&o);
    for c in doc["categories"].as_array().unwrap() {
        assert_eq!(c["successes"], 2);
    }
    let stats = json(&env.run(&["--json", "journal", "--stats"]));
    assert_eq!(stats["total"], 8);
    for o in ["EXECUTED_SAFE", "BLOCKED", "ROLLED_BACK", "COMMITTED"] {
        assert_eq!(stats["counts"][o], 2, "{o}");
    }
}

#[test]
fn bench_overhead_refuses_safe_commands() {
    let env = Env::new();
    let o = env.run(&["bench", "overhead", "--command", "ls", "--size-mb", "1"]);
    assert_eq!(status(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("MISCONFIGURED_BENCH"));
}

#[test]
fn bench_overhead_small_run() {
    let env = Env::new();
    let work = env.root.parent().unwrap().join("work");
    let o = env.run(&[
        "--json",
        "bench",
        "overhead",
        "--size-mb",
        "1",
        "--repetitions",
        "3",
        "--work-dir",
        work.to_str().unwrap(),
    ]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&o);
    assert_eq!(doc[0]["workspace_size_bytes"], 1 << 20);
    assert_eq!(doc[0]["repetitions"], 3);
    assert!(Path::new(&work).exists());
}
