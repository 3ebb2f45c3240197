//! The `run` command: gated episodes, their audit and the run artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tollgate_core::boundary::LedgerRecord;
use tollgate_core::envelope::{Envelope, EnvelopeMeta};
use tollgate_core::gate::{audit_budget_guarantee, run_episode, AuditReport, EpisodeLog, Verdict};
use tollgate_core::{ActionId, Node};

use crate::error::CliError;
use crate::scenario::{load_scenario, ConfigHash, Scenario, SCHEMA_VERSION};

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One row of the per-episode summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub episode: u64,
    pub final_budget: f64,
    pub charged: f64,
    pub executed_true_toll: f64,
    pub boundary_toll: f64,
    pub terminal_state: String,
    pub terminal_loss: f64,
    pub execute: usize,
    pub downgrade: usize,
    pub escalate_approved: usize,
    pub escalate_denied: usize,
    pub block: usize,
    pub envelope_ok: bool,
    pub overrun: bool,
}

/// The audit without its per-episode detail, which lives in the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub delta: f64,
    pub overruns: usize,
    pub overrun_fraction: f64,
    pub envelope_violations: usize,
    pub violation_fraction: f64,
    pub slack: f64,
    pub budget_nonnegative: bool,
    pub accounting_exact: bool,
    pub dominance_failures: Vec<u64>,
    pub passed: bool,
}

impl From<&AuditReport> for AuditSummary {
    fn from(a: &AuditReport) -> Self {
        Self {
            delta: a.delta,
            overruns: a.overruns,
            overrun_fraction: a.overrun_fraction,
            envelope_violations: a.envelope_violations,
            violation_fraction: a.violation_fraction,
            slack: a.slack,
            budget_nonnegative: a.budget_nonnegative,
            accounting_exact: a.accounting_exact,
            dominance_failures: a.dominance_failures.clone(),
            passed: a.passed,
        }
    }
}

/// Run manifest. Holds no timestamps or absolute paths, so identical runs
/// produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub scenario: String,
    pub scenario_file: String,
    pub seed: u64,
    pub episodes: u64,
    pub initial_budget: f64,
    pub config_hash: ConfigHash,
    pub envelope: EnvelopeMeta,
    pub audit: AuditSummary,
    pub artifacts: Vec<String>,
    pub exit_code: i32,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub logs: Vec<EpisodeLog>,
    pub audit: AuditReport,
}

#[derive(Serialize)]
struct LedgerLine<'a> {
    episode: u64,
    #[serde(flatten)]
    record: &'a LedgerRecord,
}

/// Runs episodes `0..episodes`, split across threads. Each episode draws from
/// its own stream, so the result does not depend on the split.
pub fn simulate(scenario: &Scenario, envelope: &Envelope, seed: u64, episodes: u64) -> Result<Vec<EpisodeLog>, CliError> {
    let ctx = scenario.context(envelope);
    let cfg = &scenario.file.gate;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()) as u64;
    let chunk = episodes.div_ceil(threads.max(1)).max(1);
    let parts: Vec<Result<Vec<EpisodeLog>, tollgate_core::Error>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..episodes)
            .step_by(chunk as usize)
            .map(|start| {
                let ctx = &ctx;
                s.spawn(move || {
                    (start..(start + chunk).min(episodes))
                        .map(|e| run_episode(ctx, &scenario.proposal, cfg, seed, e))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("episode worker panicked")).collect()
    });
    let mut logs = Vec::with_capacity(episodes as usize);
    for part in parts {
        logs.extend(part?);
    }
    Ok(logs)
}

/// Audits `logs` with true tolls from the path-enumeration oracle.
pub fn audit_logs(scenario: &Scenario, logs: &[EpisodeLog], delta: f64) -> Result<AuditReport, CliError> {
    let cache: Mutex<BTreeMap<(Node, ActionId), f64>> = Mutex::new(BTreeMap::new());
    let oracle = |node: Node, action: ActionId| -> tollgate_core::Result<f64> {
        if let Some(v) = cache.lock().expect("cache lock").get(&(node, action)) {
            return Ok(*v);
        }
        let v = scenario.oracle_toll(node, action)?;
        cache.lock().expect("cache lock").insert((node, action), v);
        Ok(v)
    };
    Ok(audit_budget_guarantee(scenario.model(), logs, &oracle, scenario.file.gate.initial_budget, delta)?)
}

pub fn summary_rows(logs: &[EpisodeLog], audit: &AuditReport) -> Vec<SummaryRow> {
    logs.iter()
        .zip(&audit.per_episode)
        .map(|(log, a)| {
            let count = |v: Verdict| log.ledger.records.iter().filter(|r| r.verdict == v).count();
            SummaryRow {
                episode: log.ledger.episode,
                final_budget: log.final_budget(),
                charged: a.charged,
                executed_true_toll: a.executed_true_toll,
                boundary_toll: log.ledger.boundary_toll,
                terminal_state: log.terminal_state.clone(),
                terminal_loss: log.terminal_loss,
                execute: count(Verdict::Execute),
                downgrade: count(Verdict::Downgrade),
                escalate_approved: count(Verdict::EscalateApproved),
                escalate_denied: count(Verdict::EscalateDenied),
                block: count(Verdict::Block),
                envelope_ok: a.envelope_ok,
                overrun: a.overrun,
            }
        })
        .collect()
}

/// Simulates and audits with a caller-supplied envelope; writes nothing.
pub fn run_with_envelope(
    scenario: &Scenario,
    scenario_file: &str,
    envelope: &Envelope,
    seed: u64,
    episodes: u64,
) -> Result<RunOutcome, CliError> {
    let logs = simulate(scenario, envelope, seed, episodes)?;
    let audit = audit_logs(scenario, &logs, envelope.meta().delta)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        scenario: scenario.file.name.clone(),
        scenario_file: scenario_file.to_string(),
        seed,
        episodes,
        initial_budget: scenario.file.gate.initial_budget,
        config_hash: scenario.config_hash(),
        envelope: envelope.meta().clone(),
        audit: AuditSummary::from(&audit),
        artifacts: [EPISODES_FILE, SUMMARY_FILE, LEDGER_FILE].map(String::from).to_vec(),
        exit_code: 0,
    };
    Ok(RunOutcome { manifest, logs, audit })
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| CliError::io(path, e))?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_artifacts(out: &Path, outcome: &RunOutcome) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_lines(&out.join(EPISODES_FILE), outcome.logs.iter().flat_map(|l| &l.ledger.records))?;
    write_lines(
        &out.join(LEDGER_FILE),
        outcome
            .logs
            .iter()
            .flat_map(|l| l.boundary_history.iter().map(|record| LedgerLine { episode: l.ledger.episode, record })),
    )?;
    let path = out.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
    let rows = summary_rows(&outcome.logs, &outcome.audit);
    if rows.is_empty() {
        // Keep the header so an empty run still yields a well-formed table.
        w.write_record(SUMMARY_HEADER).map_err(|e| CliError::io(&path, e))?;
    }
    for row in rows {
        w.serialize(row).map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let path = out.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&outcome.manifest).map_err(|e| CliError::io(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

const SUMMARY_HEADER: [&str; 14] = [
    "episode",
    "final_budget",
    "charged",
    "executed_true_toll",
    "boundary_toll",
    "terminal_state",
    "terminal_loss",
    "execute",
    "downgrade",
    "escalate_approved",
    "escalate_denied",
    "block",
    "envelope_ok",
    "overrun",
];

/// Loads the scenario, builds its envelope, runs, audits and writes to `out`.
/// `seed` overrides the scenario's seed.
pub fn cmd_run(scenario_path: &Path, episodes: u64, seed: Option<u64>, out: &Path) -> Result<RunOutcome, CliError> {
    let scenario = load_scenario(scenario_path)?;
    let seed = seed.unwrap_or(scenario.file.seed);
    let envelope = scenario.envelope(seed)?;
    let file_name = scenario_path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let outcome = run_with_envelope(&scenario, &file_name, &envelope, seed, episodes)?;
    write_artifacts(out, &outcome)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_row_fields() {
        let row = SummaryRow {
            episode: 0,
            final_budget: 0.0,
            charged: 0.0,
            executed_true_toll: 0.0,
            boundary_toll: 0.0,
            terminal_state: String::new(),
            terminal_loss: 0.0,
            execute: 0,
            downgrade: 0,
            escalate_approved: 0,
            escalate_denied: 0,
            block: 0,
            envelope_ok: true,
            overrun: false,
        };
        let mut w = csv::Writer::from_writer(vec![]);
        w.serialize(row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), SUMMARY_HEADER.join(","));
    }
}
