//! The `verify` command: property suites with machine-readable results.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tollgate_core::boundary::{
    adversarial_split_search, path_dependence_counterexample, random_partition, random_potential_spec,
    splitting_invariance_check, Potential, PotentialSpec,
};
use tollgate_core::envelope::{fit_conformal_envelope, Envelope, Predictor, QueryPoint, ScaledPredictor};
use tollgate_core::gate::AuditReport;
use tollgate_core::instances::{riskier_incumbent_witness, wire_transfer_witness, WitnessInstance};
use tollgate_core::oracle::{enumerate_terminal_law, static_risk, EnumerationBudget};
use tollgate_core::random::{
    premise_pair, random_ambiguity_set, random_payment_witness, random_policy, random_risk_spec, random_tree,
    TreeConfig,
};
use tollgate_core::risk::{check_axioms, check_time_consistency, cvar_inconsistency_demo, evaluate_dynamic_risk, Axiom};
use tollgate_core::toll::{authority_premium, iap_check, verify_witness, IapReport, WitnessReport};
use tollgate_core::{Intervention, RiskSpec};

use crate::bundled;
use crate::error::CliError;
use crate::run::run_with_envelope;
use crate::scenario::{EnvelopeConfig, Scenario};

/// Numerical tolerance shared by the identity checks.
pub const IDENTITY_TOL: f64 = 1e-9;
/// Factor applied to the fitted predictor in the miscalibrated fixture.
pub const DEFLATION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    TimeConsistency,
    NoSplitting,
    Iap,
    Gating,
    CvarDemo,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 6] = ["time-consistency", "no-splitting", "iap", "gating", "cvar-demo", "all"];
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "time-consistency" => Ok(Self::TimeConsistency),
            "no-splitting" => Ok(Self::NoSplitting),
            "iap" => Ok(Self::Iap),
            "gating" => Ok(Self::Gating),
            "cvar-demo" => Ok(Self::CvarDemo),
            "all" => Ok(Self::All),
            _ => Err(CliError::Usage(format!("unknown suite {s:?}; expected one of {}", Self::NAMES.join(", ")))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [Self::TimeConsistency, Self::NoSplitting, Self::Iap, Self::Gating, Self::CvarDemo, Self::All]
            .iter()
            .position(|s| s == self)
            .expect("listed");
        f.write_str(Self::NAMES[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub suite: String,
    pub property: String,
    pub passed: bool,
    /// Measured quantities, plus a counterexample when the property fails.
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub results: Vec<PropertyResult>,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Randomized models in the time-consistency suite.
    pub models: usize,
    /// Episodes per scenario in the exact-envelope gating runs.
    pub episodes: u64,
    /// Episodes in the conformal gating run.
    pub conformal_episodes: u64,
    /// Potential fixture replacing the random potentials of the splitting suite.
    pub potential: Option<PotentialFixture>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 2024, models: 200, episodes: 500, conformal_episodes: 1000, potential: None }
    }
}

/// A potential to test for splitting invariance, accepted without the
/// monotonicity check so faulty potentials can be injected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialFixture {
    pub potential: PotentialSpec,
    pub e0: Vec<f64>,
    pub total: Vec<f64>,
}

impl PotentialFixture {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let f: Self = serde_json::from_str(&text).map_err(|e| CliError::artifact(path, e))?;
        let d = f.potential.dimension();
        if f.e0.len() != d || f.total.len() != d {
            return Err(CliError::artifact(path, format!("e0 and total must have dimension {d}")));
        }
        Ok(f)
    }
}

fn result(suite: Suite, property: &str, passed: bool, detail: Value) -> PropertyResult {
    PropertyResult { suite: suite.to_string(), property: property.to_string(), passed, detail }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

// ---------------------------------------------------------------------------
// Time consistency
// ---------------------------------------------------------------------------

const SPECS: [RiskSpec; 3] = [
    RiskSpec::Expectation,
    RiskSpec::Entropic { gamma: 0.4 },
    RiskSpec::ConditionalEs { alpha: 0.75 },
];

pub fn time_consistency(opts: &VerifyOptions) -> Result<Vec<PropertyResult>, CliError> {
    let suite = Suite::TimeConsistency;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cfg = TreeConfig::default();
    let (mut pairs, mut premises, mut violations) = (0usize, 0usize, 0usize);
    let mut counterexample = Value::Null;
    for model_index in 0..opts.models {
        let m = random_tree(&mut rng, &cfg)?;
        let cont = random_policy(&mut rng, &m)?;
        for spec in SPECS {
            for s in 1..=m.horizon() {
                let (x, y) = premise_pair(&mut rng, &m, &cont, &spec, s, cfg.max_loss)?;
                let check = check_time_consistency(&m, &cont, &spec, &x, &y)?;
                pairs += check.pairs_checked;
                premises += check.premises_held;
                if let Some(v) = check.violations.first() {
                    if counterexample.is_null() {
                        counterexample = json!({ "model": model_index, "risk": spec, "violation": v, "x": x, "y": y });
                    }
                }
                violations += check.violations.len();
            }
        }
    }
    let consistency = result(
        suite,
        "dynamic_consistency",
        violations == 0 && premises > 0,
        json!({
            "models": opts.models,
            "premises_held": premises,
            "node_pairs_checked": pairs,
            "violations": violations,
            "seconds": start.elapsed().as_secs_f64(),
            "counterexample": counterexample,
        }),
    );

    let report = check_axioms(&RiskSpec::Entropic { gamma: 1.0 }, 1000, opts.seed);
    let homo = report.get(Axiom::PositiveHomogeneity);
    let axioms = result(
        suite,
        "entropic_axioms",
        report.convex_axioms_hold() && !homo.passed && homo.counterexample.is_some(),
        to_value(&report),
    );

    Ok(vec![consistency, axioms, tower_identity()?])
}

/// Recursive entropic value against the static entropic risk of the
/// enumerated terminal law, at every root action of every shipped scenario.
pub fn tower_identity() -> Result<PropertyResult, CliError> {
    let mut rows = vec![];
    let mut worst = 0.0f64;
    for name in bundled::NAMES {
        let s = bundled::load(name)?;
        let gamma = match s.file.risk {
            RiskSpec::Entropic { gamma } => gamma,
            _ => 0.1,
        };
        let spec = RiskSpec::Entropic { gamma };
        let m = s.model();
        let budget = EnumerationBudget::default();
        for &a in m.actions(m.root())? {
            let iv = Intervention::new(m, m.root(), a)?;
            let rec = evaluate_dynamic_risk(m, &iv, &s.cont, &spec)?.root_value();
            let law = enumerate_terminal_law(m, &iv, &s.cont, &budget)?;
            let stat = static_risk(&law, &spec);
            worst = worst.max((rec - stat).abs());
            rows.push(json!({ "scenario": name, "gamma": gamma, "action": m.action_name(a), "recursive": rec, "static": stat }));
        }
    }
    Ok(result(
        Suite::TimeConsistency,
        "entropic_tower_identity",
        worst <= IDENTITY_TOL,
        json!({ "max_abs_error": worst, "tolerance": IDENTITY_TOL, "values": rows }),
    ))
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

pub fn no_splitting(opts: &VerifyOptions) -> Result<Vec<PropertyResult>, CliError> {
    let suite = Suite::NoSplitting;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = vec![];
    if let Some(f) = &opts.potential {
        let pot = Potential::unchecked(f.potential.clone());
        let report = adversarial_split_search(&mut rng, &pot, &f.e0, &f.total, 500, 8)?;
        let first = report.violations.first();
        out.push(result(
            suite,
            "telescoping_fixture",
            report.passed(),
            json!({
                "expected": report.expected,
                "partitions": report.sums.len(),
                "violations": report.violations.len(),
                "violating_partition": first.map(|v| &v.sequence),
                "counterexample": first,
            }),
        ));
    } else {
        let tuples = 500;
        let mut worst = 0.0f64;
        let mut counterexample = Value::Null;
        let mut failures = 0;
        for _ in 0..tuples {
            let d = rng.gen_range(1..=3);
            let spec = random_potential_spec(&mut rng, d);
            let pot = Potential::new(spec.clone())?;
            let e0: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..5.0)).collect();
            let total: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..5.0)).collect();
            let partition = random_partition(&mut rng, &total, 8);
            let report = splitting_invariance_check(&pot, &e0, &total, std::slice::from_ref(&partition))?;
            // The target is recomputed here from the potential directly.
            let end: Vec<f64> = e0.iter().zip(&total).map(|(a, b)| a + b).collect();
            let direct = pot.eval(&end) - pot.eval(&e0);
            let err = (report.sums[0] - direct).abs();
            worst = worst.max(err);
            if err > IDENTITY_TOL || !report.passed() {
                failures += 1;
                if counterexample.is_null() {
                    counterexample = json!({ "potential": spec, "e0": e0, "total": total, "partition": partition });
                }
            }
        }
        out.push(result(
            suite,
            "telescoping",
            failures == 0,
            json!({ "tuples": tuples, "max_abs_error": worst, "tolerance": IDENTITY_TOL, "counterexample": counterexample }),
        ));
    }
    let r = path_dependence_counterexample();
    out.push(result(
        suite,
        "path_dependence",
        (r.lambda_sums[0] - r.lambda_sums[1]).abs() <= IDENTITY_TOL
            && r.gap > 0.01
            && r.redesigned_max_spread <= IDENTITY_TOL
            && r.assumption_max_spread <= IDENTITY_TOL,
        to_value(&r),
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Authority premium
// ---------------------------------------------------------------------------

fn witness_and_iap(inst: &WitnessInstance) -> Result<(WitnessReport, IapReport), CliError> {
    let amb = &inst.ambiguity;
    let sdm = inst.safe_defaults();
    let budget = EnumerationBudget::default();
    let w = verify_witness(amb, inst.node, inst.a_plus, &inst.cont, &inst.spec, sdm, &inst.witness, &budget)?;
    let iap = iap_check(amb, inst.node, &inst.base, inst.a_plus, &inst.cont, &inst.spec, sdm)?;
    Ok((w, iap))
}

pub fn iap(opts: &VerifyOptions) -> Result<Vec<PropertyResult>, CliError> {
    let suite = Suite::Iap;
    let mut out = vec![];

    let (w, r) = witness_and_iap(&wire_transfer_witness()?)?;
    out.push(result(
        suite,
        "witness_implies_premium",
        w.all_hold() && r.premium > 0.0 && r.capital_increases && r.iff_holds(),
        json!({ "witness": w, "iap": r }),
    ));

    let (w, r) = witness_and_iap(&riskier_incumbent_witness()?)?;
    out.push(result(
        suite,
        "premium_without_capital",
        w.all_hold() && r.premium > 0.0 && !r.capital_increases && r.iff_holds() && r.decomposition_holds(IDENTITY_TOL),
        json!({ "witness": w, "iap": r }),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cfg = TreeConfig { max_depth: 4, ..TreeConfig::default() };
    let (mut sets, mut increases, mut unchanged, mut worst) = (0usize, 0usize, 0usize, 0.0f64);
    let mut counterexample = Value::Null;
    while sets < 150 {
        let n = rng.gen_range(1..=4);
        let amb = random_ambiguity_set(&mut rng, &cfg, n)?;
        let m = amb.reference();
        let acts = m.actions(m.root())?.to_vec();
        if acts.len() < 2 {
            continue;
        }
        let cont = random_policy(&mut rng, m)?;
        let spec = random_risk_spec(&mut rng);
        let (a_plus, base) = acts.split_last().expect("two actions");
        let r = iap_check(&amb, m.root(), base, *a_plus, &cont, &spec, m.safe_defaults())?;
        worst = worst.max(r.decomposition_error);
        if r.capital_increases {
            increases += 1;
        } else {
            unchanged += 1;
        }
        if (!r.iff_holds() || !r.decomposition_holds(IDENTITY_TOL)) && counterexample.is_null() {
            counterexample = json!({ "set": sets, "risk": spec, "report": r });
        }
        sets += 1;
    }
    out.push(result(
        suite,
        "capital_iff",
        counterexample.is_null() && increases > 0 && unchanged > 0,
        json!({
            "ambiguity_sets": sets,
            "capital_increased": increases,
            "capital_unchanged": unchanged,
            "max_decomposition_error": worst,
            "counterexample": counterexample,
        }),
    ));

    let budget = EnumerationBudget::default();
    let (mut holds, mut premium_failures) = (0usize, 0usize);
    let mut counterexample = Value::Null;
    for i in 0..300 {
        let inst = random_payment_witness(&mut rng)?;
        let sdm = inst.safe_defaults();
        let w = verify_witness(&inst.ambiguity, inst.node, inst.a_plus, &inst.cont, &inst.spec, sdm, &inst.witness, &budget)?;
        if w.all_hold() {
            holds += 1;
            let p = authority_premium(&inst.ambiguity, inst.node, inst.a_plus, &inst.cont, &inst.spec, sdm)?;
            if p <= 0.0 {
                premium_failures += 1;
                if counterexample.is_null() {
                    counterexample = json!({ "draw": i, "risk": inst.spec, "witness": w, "premium": p });
                }
            }
        }
    }
    out.push(result(
        suite,
        "random_witnesses_imply_premium",
        premium_failures == 0 && holds > 0,
        json!({ "draws": 300, "witnesses_holding": holds, "counterexample": counterexample }),
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// CVaR demo
// ---------------------------------------------------------------------------

pub fn cvar_demo() -> Vec<PropertyResult> {
    let suite = Suite::CvarDemo;
    let d = cvar_inconsistency_demo();
    let numbers = json!({
        "alpha": d.alpha,
        "stage_x": d.stage_x,
        "stage_y": d.stage_y,
        "static_x": d.static_x,
        "static_y": d.static_y,
        "recursive_x": d.recursive_x,
        "recursive_y": d.recursive_y,
        "reversal_gap": d.reversal_gap(),
    });
    vec![
        result(suite, "static_reversal", d.stagewise_dominated() && d.reversal_gap() > 0.01, numbers.clone()),
        result(suite, "recursive_no_reversal", !d.recursive_reversed(), numbers),
    ]
}

// ---------------------------------------------------------------------------
// Gating
// ---------------------------------------------------------------------------

/// Audit of the shipped scenario `name` under its exact envelope.
pub fn exact_gating(name: &str, seed: u64, episodes: u64) -> Result<AuditReport, CliError> {
    let s = bundled::load(name)?;
    let env = s.exact_envelope()?;
    Ok(run_with_envelope(&s, &bundled::file_name(name), &env, seed, episodes)?.audit)
}

/// The scenario's conformal envelope and a copy whose predictor is scaled by
/// [`DEFLATION`] with zero margin.
pub fn conformal_pair(s: &Scenario, seed: u64) -> Result<(Envelope, Envelope), CliError> {
    let EnvelopeConfig::Conformal { delta, calibration_size, training_size } = s.file.envelope else {
        return Err(CliError::Usage(format!("scenario {} has no conformal envelope", s.file.name)));
    };
    let fit = s.conformal_fit(seed, delta, calibration_size, training_size)?;
    let inner: Arc<dyn Predictor> = fit.predictor.clone();
    let deflated: Arc<dyn Predictor> = Arc::new(ScaledPredictor { inner, factor: DEFLATION });
    let cal: Vec<(QueryPoint, f64)> = fit.calibration.iter().map(|q| (q.point.clone(), q.true_toll)).collect();
    let bad = fit_conformal_envelope(deflated, &cal, delta)?.with_inflation(0.0)?;
    Ok((fit.envelope, bad))
}

/// The conformal pass rule: violations within `delta` plus slack and
/// overruns no more frequent than violations.
pub fn conformal_ok(a: &AuditReport) -> bool {
    a.violation_fraction <= a.delta + a.slack && a.overrun_fraction <= a.violation_fraction && a.passed
}

fn audit_detail(a: &AuditReport) -> Value {
    json!({
        "episodes": a.episodes,
        "delta": a.delta,
        "overruns": a.overruns,
        "overrun_fraction": a.overrun_fraction,
        "violation_fraction": a.violation_fraction,
        "slack": a.slack,
        "accounting_exact": a.accounting_exact,
        "budget_nonnegative": a.budget_nonnegative,
        "dominance_failures": a.dominance_failures,
        "audit_passed": a.passed,
    })
}

pub fn gating(opts: &VerifyOptions) -> Result<Vec<PropertyResult>, CliError> {
    let suite = Suite::Gating;
    let mut out = vec![];
    for name in bundled::NAMES {
        let a = exact_gating(name, opts.seed, opts.episodes)?;
        let ok = a.overruns == 0 && a.accounting_exact && a.budget_nonnegative && a.passed;
        out.push(result(suite, &format!("exact_envelope[{name}]"), ok, audit_detail(&a)));
    }
    let s = bundled::load("trading")?;
    let (good, bad) = conformal_pair(&s, opts.seed)?;
    let file = bundled::file_name("trading");
    let a = run_with_envelope(&s, &file, &good, opts.seed, opts.conformal_episodes)?.audit;
    let mut detail = audit_detail(&a);
    detail["inflation"] = json!(good.inflation());
    out.push(result(suite, "conformal_envelope[trading]", conformal_ok(&a), detail));
    let a = run_with_envelope(&s, &file, &bad, opts.seed, opts.conformal_episodes)?.audit;
    out.push(result(suite, "miscalibrated_envelope_detected[trading]", !a.passed, audit_detail(&a)));
    Ok(out)
}

pub fn cmd_verify(suite: Suite, opts: &VerifyOptions) -> Result<VerifyReport, CliError> {
    let mut results = vec![];
    let all = suite == Suite::All;
    if all || suite == Suite::TimeConsistency {
        results.extend(time_consistency(opts)?);
    }
    if all || suite == Suite::NoSplitting {
        results.extend(no_splitting(opts)?);
    }
    if all || suite == Suite::Iap {
        results.extend(iap(opts)?);
    }
    if all || suite == Suite::Gating {
        results.extend(gating(opts)?);
    }
    if all || suite == Suite::CvarDemo {
        results.extend(cvar_demo());
    }
    Ok(VerifyReport { seed: opts.seed, passed: results.iter().all(|r| r.passed), results })
}
