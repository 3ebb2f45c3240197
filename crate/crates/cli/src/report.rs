//! The `report` command: a read-only summary of a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use tollgate_core::gate::{StepRecord, Verdict, ACCOUNTING_TOL};

use crate::error::CliError;
use crate::run::{Manifest, SummaryRow, EPISODES_FILE, MANIFEST_FILE, SUMMARY_FILE};

/// How many episodes get their budget path printed.
const TRAJECTORIES: usize = 5;

const VERDICTS: [Verdict; 5] = [
    Verdict::Execute,
    Verdict::Downgrade,
    Verdict::EscalateApproved,
    Verdict::EscalateDenied,
    Verdict::Block,
];

/// Statistics recomputed from the summary and episode log.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub manifest: Manifest,
    pub episodes: usize,
    pub steps: usize,
    pub verdicts: BTreeMap<String, usize>,
    /// Budget after each step, for the first few episodes.
    pub trajectories: Vec<(u64, Vec<f64>)>,
    pub final_budgets: Vec<f64>,
    pub violation_fraction: f64,
    pub overrun_fraction: f64,
    pub slack: f64,
    pub accounting_exact: bool,
    pub budget_nonnegative: bool,
    pub passed: bool,
}

fn read(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact { path: path.to_path_buf() });
    }
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn verdict_name(v: Verdict) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

pub fn load_report(dir: &Path) -> Result<RunReport, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&read(&path)?).map_err(|e| CliError::artifact(&path, e))?;

    let path = dir.join(SUMMARY_FILE);
    let text = read(&path)?;
    let rows: Vec<SummaryRow> = csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::artifact(&path, e))?;
    if rows.len() as u64 != manifest.episodes {
        return Err(CliError::artifact(
            &path,
            format!("{} rows for {} episodes in the manifest", rows.len(), manifest.episodes),
        ));
    }

    let path = dir.join(EPISODES_FILE);
    let mut verdicts: BTreeMap<String, usize> = VERDICTS.iter().map(|&v| (verdict_name(v), 0)).collect();
    let mut paths: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut steps = 0;
    let mut budget_nonnegative = true;
    for (i, line) in read(&path)?.lines().enumerate() {
        let r: StepRecord = serde_json::from_str(line).map_err(|e| CliError::artifact(&path, format!("line {}: {e}", i + 1)))?;
        steps += 1;
        *verdicts.entry(verdict_name(r.verdict)).or_default() += 1;
        budget_nonnegative &= r.budget_after >= 0.0;
        if r.episode < TRAJECTORIES as u64 {
            paths.entry(r.episode).or_default().push(r.budget_after);
        }
    }

    let b0 = manifest.initial_budget;
    let tol = ACCOUNTING_TOL * (1.0 + b0);
    let n = rows.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let violation_fraction = frac(rows.iter().filter(|r| !r.envelope_ok).count());
    let overruns = rows.iter().filter(|r| r.overrun).count();
    let overrun_fraction = frac(overruns);
    let delta = manifest.envelope.delta;
    let slack = if n == 0 { 0.0 } else { 3.0 * (delta * (1.0 - delta) / n as f64).sqrt() };
    let accounting_exact = rows.iter().all(|r| (r.charged - (b0 - r.final_budget)).abs() <= tol);
    budget_nonnegative &= rows.iter().all(|r| r.final_budget >= 0.0);
    let dominated = rows.iter().all(|r| !(r.envelope_ok && r.overrun));
    let within = if delta == 0.0 { overruns == 0 } else { overrun_fraction <= delta + slack };
    Ok(RunReport {
        episodes: n,
        steps,
        verdicts,
        trajectories: paths.into_iter().map(|(e, mut p)| {
            p.insert(0, b0);
            (e, p)
        }).collect(),
        final_budgets: rows.iter().map(|r| r.final_budget).collect(),
        violation_fraction,
        overrun_fraction,
        slack,
        accounting_exact,
        budget_nonnegative,
        passed: within && accounting_exact && budget_nonnegative && dominated,
        manifest,
    })
}

pub fn render(r: &RunReport) -> String {
    let m = &r.manifest;
    let mut s = String::new();
    let _ = writeln!(s, "scenario {} ({}), seed {}, {} episodes", m.scenario, m.scenario_file, m.seed, r.episodes);
    let _ = writeln!(s, "config hash {}", m.config_hash.combined);
    let _ = writeln!(
        s,
        "envelope {:?}: delta {}, inflation {:.6}, calibration points {}",
        m.envelope.kind, m.envelope.delta, m.envelope.inflation, m.envelope.calibration_size
    );
    if r.episodes == 0 {
        let _ = writeln!(s, "zero episodes: nothing to summarize");
        let _ = writeln!(s, "guarantee: PASS (vacuous)");
        return s;
    }

    let _ = writeln!(s, "\ndecision mix over {} steps", r.steps);
    for (name, count) in &r.verdicts {
        let pct = if r.steps == 0 { 0.0 } else { 100.0 * *count as f64 / r.steps as f64 };
        let _ = writeln!(s, "  {name:<18} {count:>8} {pct:>6.1}%");
    }

    let _ = writeln!(s, "\nbudget trajectories (B0 = {})", m.initial_budget);
    for (episode, path) in &r.trajectories {
        let steps: Vec<String> = path.iter().map(|b| format!("{b:.4}")).collect();
        let _ = writeln!(s, "  episode {episode}: {}", steps.join(" -> "));
    }
    let (lo, hi) = r.final_budgets.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &b| (lo.min(b), hi.max(b)));
    let mean = r.final_budgets.iter().sum::<f64>() / r.episodes as f64;
    let _ = writeln!(s, "  final budget: min {lo:.4}, mean {mean:.4}, max {hi:.4}");

    let _ = writeln!(s, "\ncoverage estimate: {:.4} of episodes had every quote covered", 1.0 - r.violation_fraction);
    let _ = writeln!(s, "violation fraction: {:.4}", r.violation_fraction);
    let bound = if m.envelope.delta == 0.0 { 0.0 } else { m.envelope.delta + r.slack };
    let _ = writeln!(s, "overrun fraction: {:.4} (allowed {:.4})", r.overrun_fraction, bound);
    let _ = writeln!(s, "accounting exact: {}", r.accounting_exact);
    let _ = writeln!(s, "guarantee: {}", if r.passed { "PASS" } else { "FAIL" });
    s
}

pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    Ok(render(&load_report(dir)?))
}
