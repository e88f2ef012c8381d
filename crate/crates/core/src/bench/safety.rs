//! Per-category safety validation over the scenario suite.

use std::fs;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{builtin_scenarios, BenchError, Category, Scenario};
use crate::executor::{ExecError, ExecutionRequest, ExecutionResult, Executor, ProcessExecutor};
use crate::policy::PolicySet;
use crate::snapshot::compute_digest;
use crate::transaction::{ExecOptions, Outcome, TransactionRecord, Workspace};

pub const DEFAULT_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: Category,
    pub expected_outcome: Outcome,
    pub attempts: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyFailure {
    pub scenario: String,
    pub category: Category,
    pub attempt: usize,
    pub expected: Outcome,
    pub actual: Option<Outcome>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub categories: Vec<CategoryResult>,
    pub failures: Vec<SafetyFailure>,
}

impl SafetyReport {
    pub fn category(&self, c: Category) -> Option<&CategoryResult> {
        self.categories.iter().find(|r| r.category == c)
    }

    pub fn all_passed(&self) -> bool {
        self.failures.is_empty() && self.categories.iter().all(|c| c.successes == c.attempts)
    }
}

/// Stands in for the real executor on blacklisted scenarios, so a policy
/// regression can never run a destructive command on the host.
struct RefusingExecutor;

impl Executor for RefusingExecutor {
    fn execute(&self, _req: &ExecutionRequest) -> Result<ExecutionResult, ExecError> {
        Err(ExecError::InvalidRequest(
            "blacklisted scenario reached the executor".into(),
        ))
    }
}

/// Runs the built-in suite with `attempts_per_category` attempts per category.
pub fn run_safety_suite(policy: &PolicySet, attempts_per_category: usize) -> Result<SafetyReport, BenchError> {
    run_safety_suite_with(&builtin_scenarios(), policy, attempts_per_category, &mut |_| {})
}

/// Runs `scenarios`, cycling through each category's scenarios until it has
/// `attempts_per_category` attempts. Every attempt gets a fresh workspace.
/// `sink` sees each transaction record (for journaling).
pub fn run_safety_suite_with(
    scenarios: &[Scenario],
    policy: &PolicySet,
    attempts_per_category: usize,
    sink: &mut dyn FnMut(&TransactionRecord),
) -> Result<SafetyReport, BenchError> {
    let mut categories = Vec::new();
    let mut failures = Vec::new();
    for category in Category::ALL {
        let members: Vec<&Scenario> = scenarios.iter().filter(|s| s.category == category).collect();
        let attempts = if members.is_empty() { 0 } else { attempts_per_category };
        let mut successes = 0;
        for attempt in 0..attempts {
            let scenario = members[attempt % members.len()];
            match run_attempt(scenario, policy, sink)? {
                Ok(()) => successes += 1,
                Err((actual, reason)) => failures.push(SafetyFailure {
                    scenario: scenario.name.clone(),
                    category,
                    attempt,
                    expected: scenario.expected_outcome,
                    actual,
                    reason,
                }),
            }
        }
        categories.push(CategoryResult {
            category,
            expected_outcome: category.expected_outcome(),
            attempts,
            successes,
            success_rate: if attempts == 0 { 0.0 } else { successes as f64 / attempts as f64 },
        });
    }
    Ok(SafetyReport {
        categories,
        failures,
    })
}

type Verdict = Result<(), (Option<Outcome>, String)>;

fn run_attempt(
    scenario: &Scenario,
    policy: &PolicySet,
    sink: &mut dyn FnMut(&TransactionRecord),
) -> Result<Verdict, BenchError> {
    let tmp = tempfile::Builder::new()
        .prefix("txbox-safety-")
        .tempdir()
        .map_err(|source| BenchError::Io {
            path: std::env::temp_dir(),
            source,
        })?;
    let root = tmp.path().join("workspace");
    let store = tmp.path().join("store");
    fs::create_dir(&root).map_err(|source| BenchError::Io {
        path: root.clone(),
        source,
    })?;
    scenario.prepare(&root)?;

    let executor: Arc<dyn Executor> = if scenario.category == Category::Blacklisted {
        Arc::new(RefusingExecutor)
    } else {
        Arc::new(ProcessExecutor)
    };
    let ws = Workspace::builder(&root, &store).executor(executor).open()?;
    let before = compute_digest(&root)?;
    let rec = match ws.run_transaction(&scenario.command, policy, &ExecOptions::default()) {
        Ok(r) => r,
        Err(e) => return Ok(Err((None, e.to_string()))),
    };
    sink(&rec);

    if rec.outcome != scenario.expected_outcome {
        let why = rec
            .error
            .as_ref()
            .map(|e| e.message.clone())
            .unwrap_or_else(|| format!("outcome {}", rec.outcome));
        return Ok(Err((Some(rec.outcome), why)));
    }
    let after = compute_digest(&root)?;
    let check = match rec.outcome {
        Outcome::RolledBack if after != before => Err("workspace digest differs after rollback".to_string()),
        Outcome::RolledBack if rec.post_digest.as_ref() != Some(&before) => {
            Err("recorded post-rollback digest differs from the pre-execution digest".to_string())
        }
        Outcome::Blocked if after != before => Err("blocked command changed the workspace".to_string()),
        Outcome::Committed if after == before => Err("committed command left no change".to_string()),
        _ => Ok(()),
    };
    if let Err(reason) = check {
        return Ok(Err((Some(rec.outcome), reason)));
    }
    let residue = fs::read_dir(ws.snapshot_dir())
        .map_err(|source| BenchError::Io {
            path: ws.snapshot_dir().to_path_buf(),
            source,
        })?
        .count();
    if residue != 0 {
        return Ok(Err((Some(rec.outcome), format!("{residue} snapshot(s) left behind"))));
    }
    Ok(Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_attempt_per_category() {
        let mut seen = Vec::new();
        let report = run_safety_suite_with(
            &builtin_scenarios(),
            &PolicySet::default_policy(),
            1,
            &mut |r| seen.push(r.outcome),
        )
        .unwrap();
        assert_eq!(report.categories.len(), 4);
        for c in &report.categories {
            assert_eq!(c.attempts, 1);
        }
        assert!(report.all_passed(), "{:?}", report.failures);
        assert_eq!(
            seen,
            vec![Outcome::ExecutedSafe, Outcome::Blocked, Outcome::RolledBack, Outcome::Committed]
        );
    }

    #[test]
    fn mis_specified_scenario_is_reported() {
        let mut suite = builtin_scenarios();
        suite.retain(|s| s.category == Category::ValidChange);
        let mut bad = suite[0].clone();
        bad.name = "vc-actually-fails".into();
        bad.command = "echo half > half.txt; exit 1".into();
        suite.push(bad);
        let report =
            run_safety_suite_with(&suite, &PolicySet::default_policy(), 3, &mut |_| {}).unwrap();
        let vc = report.category(Category::ValidChange).unwrap();
        assert_eq!(vc.attempts, 3);
        assert_eq!(vc.successes, 2);
        assert!((vc.success_rate - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.failures.len(), 1);
        let f = &report.failures[0];
        assert_eq!(f.scenario, "vc-actually-fails");
        assert_eq!(f.expected, Outcome::Committed);
        assert_eq!(f.actual, Some(Outcome::RolledBack));
        assert!(!report.all_passed());
    }

    #[test]
    fn blacklisted_regression_cannot_execute() {
        let mut s = builtin_scenarios();
        s.retain(|s| s.category == Category::Blacklisted);
        let report = run_safety_suite_with(&s, &PolicySet::empty(), 2, &mut |_| {}).unwrap();
        let bl = report.category(Category::Blacklisted).unwrap();
        assert_eq!(bl.successes, 0);
        assert!(report.failures.iter().all(|f| f.actual == Some(Outcome::RolledBack)));
    }
}
