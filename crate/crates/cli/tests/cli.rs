use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tollgate_cli::run::SummaryRow;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tollgate"))
}

fn root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn scenario(name: &str) -> PathBuf {
    root().join("scenarios").join(format!("{name}.scn.json"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(out: &[u8]) -> String {
    String::from_utf8_lossy(out).into_owned()
}

fn run_scenario(name: &str, episodes: u64, seed: Option<u64>, out: &Path) -> Output {
    let mut cmd = bin();
    cmd.args(["run", "--scenario"]).arg(scenario(name)).args(["--episodes", &episodes.to_string(), "--out"]).arg(out);
    if let Some(s) = seed {
        cmd.args(["--seed", &s.to_string()]);
    }
    cmd.output().expect("binary runs")
}

#[test]
fn reference_run_has_no_budget_violations() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_scenario("payments", 100, None, dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let rows: Vec<SummaryRow> = csv::Reader::from_path(dir.path().join("summary.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| !r.overrun && r.final_budget >= 0.0));
    assert!(rows.iter().all(|r| (r.charged - (60.0 - r.final_budget)).abs() <= 1e-9));
    let report = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert!(report.status.success());
    let r = text(&report.stdout);
    assert!(r.contains("violation fraction: 0.0000"), "{r}");
    assert!(r.contains("guarantee: PASS"), "{r}");
    assert!(r.contains("decision mix"), "{r}");
}

#[test]
fn zero_episodes_write_empty_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_scenario("database", 0, None, dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("episodes.jsonl")).unwrap(), "");
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["episodes"], 0);
    let report = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert!(report.status.success());
    assert!(text(&report.stdout).contains("zero episodes"));
}

#[test]
fn corrupt_scenario_reports_parse_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.scn.json");
    fs::write(&bad, "{\n  \"schema_version\": 1,\n  \"name\": oops\n}\n").unwrap();
    let out = run(&["run", "--scenario", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = text(&out.stderr);
    assert!(err.contains("parse error at line 3"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn identical_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(run_scenario("trading", 200, Some(5), d.path()).status.success());
    }
    for f in ["episodes.jsonl", "summary.csv", "ledger.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    assert!(run_scenario("trading", 200, Some(6), c.path()).status.success());
    assert_ne!(fs::read(a.path().join("episodes.jsonl")).unwrap(), fs::read(c.path().join("episodes.jsonl")).unwrap());
}

#[test]
fn report_requires_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(8));
    assert!(text(&out.stderr).contains("missing artifact"));
}

#[test]
fn verify_suites_and_usage() {
    let out = run(&["verify", "--suite", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("unknown suite"));

    let out = run(&["verify", "--suite", "all"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stdout));
    let lines: Vec<serde_json::Value> =
        text(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let (last, props) = lines.split_last().unwrap();
    assert_eq!(last["passed"], true);
    for suite in ["time-consistency", "no-splitting", "iap", "gating", "cvar-demo"] {
        assert!(props.iter().any(|p| p["suite"] == suite), "{suite} missing");
    }
    assert!(props.iter().all(|p| p["passed"] == true));
}

#[test]
fn injected_non_monotone_potential_fails_with_partition() {
    let fixture = root().join("fixtures").join("non_monotone_potential.json");
    let out = run(&["verify", "--suite", "no-splitting", "--potential", fixture.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let first: serde_json::Value = serde_json::from_str(text(&out.stdout).lines().next().unwrap()).unwrap();
    assert_eq!(first["property"], "telescoping_fixture");
    assert_eq!(first["passed"], false);
    let partition = first["detail"]["violating_partition"].as_array().unwrap();
    let total: f64 = partition.iter().map(|p| p[0].as_f64().unwrap()).sum();
    assert!((total - 2.0).abs() <= 1e-9);
}

fn calibrate(name: &str, n: usize, delta: f64, out: &Path) -> Output {
    let mut cmd = bin();
    cmd.args(["calibrate", "--scenario"]).arg(scenario(name));
    cmd.args(["--n", &n.to_string(), "--delta", &delta.to_string(), "--out"]).arg(out);
    cmd.output().expect("binary runs")
}

#[test]
fn calibration_ranks_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = calibrate("trading", 500, 0.1, dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("quantile rank 451 of 500"));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("envelope.json")).unwrap()).unwrap();
    assert!(meta["envelope"]["inflation"].as_f64().unwrap() >= 0.0);
    let mut residuals: Vec<f64> = csv::Reader::from_path(dir.path().join("calibration.csv"))
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().next_back().unwrap().parse().unwrap())
        .collect();
    assert_eq!(residuals.len(), 500);
    residuals.sort_by(f64::total_cmp);
    assert_eq!(meta["envelope"]["inflation"].as_f64().unwrap(), residuals[450].max(0.0));

    for name in ["trading", "payments"] {
        let one = tempfile::tempdir().unwrap();
        let out = calibrate(name, 1, 0.5, one.path());
        assert!(out.status.success(), "{}", text(&out.stderr));
        assert!(text(&out.stdout).contains("quantile rank 1 of 1"));
        let rec = csv::Reader::from_path(one.path().join("calibration.csv")).unwrap().records().next().unwrap().unwrap();
        let residual: f64 = rec.iter().next_back().unwrap().parse().unwrap();
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(one.path().join("envelope.json")).unwrap()).unwrap();
        assert_eq!(meta["envelope"]["inflation"].as_f64().unwrap(), residual.max(0.0));
    }

    let out = calibrate("trading", 3, 0.1, &dir.path().join("small"));
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("need at least 9"));
}
