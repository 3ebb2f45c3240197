mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tollgate_core::boundary::{BoundaryLedger, BoundarySpec, PotentialSpec, XiPolicy};
use tollgate_core::envelope::{
    coverage_estimate, exact_envelope, fit_conformal_envelope, Envelope, FeatureMap, LinearPredictor, QueryPoint,
    ScaledPredictor,
};
use tollgate_core::gate::{
    audit_budget_guarantee, gate_step, run_episode, ExposureMap, Fallback, GateConfig, GateContext, GateLedger,
    ScriptedApprover, Verdict,
};
use tollgate_core::instances::{trading_spec, wire_transfer_witness};
use tollgate_core::mdp::is_side_effect_bearing;
use tollgate_core::toll::counterfactual_toll;
use tollgate_core::{build_model, EnvironmentModel, Error, Policy, RiskSpec};

const SPEC: RiskSpec = RiskSpec::Entropic { gamma: 0.3 };

fn cfg(b0: f64, order: Vec<Fallback>) -> GateConfig {
    GateConfig { initial_budget: b0, fallback_order: order, approver: ScriptedApprover::default(), escalation_threshold: None }
}

/// All priced query points of the trading desk with their true positive tolls.
fn pool() -> (EnvironmentModel, Vec<(QueryPoint, f64)>) {
    let m = build_model(&trading_spec(300)).unwrap();
    let cont = Policy::noop(&m);
    let fm = FeatureMap::new(&m);
    let mut pts = Vec::new();
    for node in m.nodes() {
        for &a in m.actions(node).unwrap() {
            if is_side_effect_bearing(&m, node, a).unwrap() {
                let t = counterfactual_toll(&m, node, a, &cont, &SPEC, m.safe_defaults()).unwrap();
                pts.push((fm.query(&m, node, a), t.positive_toll));
            }
        }
    }
    assert_eq!(pts.len(), 600);
    (m, pts)
}

fn split_fit(pts: &mut [(QueryPoint, f64)], rng: &mut ChaCha8Rng, n_cal: usize, delta: f64) -> Envelope {
    pts.shuffle(rng);
    let n_train = pts.len() / 4;
    let pred = LinearPredictor::fit(&pts[..n_train]).unwrap();
    fit_conformal_envelope(Arc::new(pred), &pts[n_train..n_train + n_cal], delta).unwrap()
}

#[test]
fn conformal_mean_coverage_over_resplits() {
    let (m, mut pts) = pool();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (delta, n_cal) = (0.1, 100);
    let mut total = 0.0;
    for _ in 0..200 {
        let env = split_fit(&mut pts, &mut rng, n_cal, delta);
        let start = pts.len() / 4 + n_cal;
        total += coverage_estimate(&env, &m, &pts[start..]).unwrap();
    }
    let mean = total / 200.0;
    assert!(mean >= 1.0 - delta - 0.02, "mean coverage {mean}");
}

#[test]
fn inflation_is_monotone_in_delta_and_queries_nonnegative() {
    let (m, mut pts) = pool();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    pts.shuffle(&mut rng);
    let pred: Arc<LinearPredictor> = Arc::new(LinearPredictor::fit(&pts[..100]).unwrap());
    let cal = &pts[100..300];
    let mut prev = f64::INFINITY;
    for delta in [0.02, 0.05, 0.1, 0.2, 0.3, 0.5] {
        let env = fit_conformal_envelope(pred.clone(), cal, delta).unwrap();
        assert!(env.inflation() <= prev);
        prev = env.inflation();
        for (q, _) in &pts {
            assert!(env.query(&m, q).unwrap() >= 0.0);
        }
    }
}

#[test]
fn deflated_predictor_undercovers() {
    let (m, mut pts) = pool();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let env = split_fit(&mut pts, &mut rng, 200, 0.1);
    let biased: Arc<ScaledPredictor> = Arc::new(ScaledPredictor { inner: Arc::new(LinearPredictor::fit(&pts[..100]).unwrap()), factor: 0.3 });
    let deflated = fit_conformal_envelope(biased, &pts[100..300], 0.1).unwrap().with_inflation(0.0).unwrap();
    assert!(coverage_estimate(&deflated, &m, &pts[300..]).unwrap() < 0.9);
    assert!(coverage_estimate(&env, &m, &pts[300..]).unwrap() > coverage_estimate(&deflated, &m, &pts[300..]).unwrap());
    assert!(matches!(coverage_estimate(&env, &m, &[]), Err(Error::EmptyTestSet)));
}

#[test]
fn exact_envelope_covers_everything() {
    let inst = wire_transfer_witness().unwrap();
    let wm = &inst.ambiguity.models()[0];
    let env = exact_envelope(wm, &inst.cont, &SPEC, wm.safe_defaults()).unwrap();
    let fm = FeatureMap::new(wm);
    let mut test = Vec::new();
    for node in wm.nodes() {
        for &a in wm.actions(node).unwrap() {
            let t = counterfactual_toll(wm, node, a, &inst.cont, &SPEC, wm.safe_defaults());
            if let Ok(t) = t {
                test.push((fm.query(wm, node, a), t.positive_toll));
            }
        }
    }
    assert_eq!(coverage_estimate(&env, wm, &test).unwrap(), 1.0);
    let wire = wm.action_id("wire_transfer").unwrap();
    let exact = counterfactual_toll(wm, wm.root(), wire, &inst.cont, &SPEC, wm.safe_defaults()).unwrap();
    assert_eq!(env.query(wm, &fm.query(wm, wm.root(), wire)).unwrap(), exact.positive_toll);
    assert!(env.with_inflation(1.0).is_err());
}

/// One priced step with deterministic leaves: `small` costs 4, `big` 12, `free` 0.
fn ladder() -> EnvironmentModel {
    common::one_shot(&[("safe", 0), ("small", 1), ("big", 2), ("free", 3)], &[0.0, 4.0, 12.0, 0.0])
}

fn one_step(m: &EnvironmentModel, b0: f64, action: &str, order: Vec<Fallback>) -> (Verdict, f64, String) {
    let env = exact_envelope(m, &Policy::noop(m), &SPEC, m.safe_defaults()).unwrap();
    let (b, xi, ex) = (vec![], BTreeMap::new(), ExposureMap::new());
    let ctx = GateContext::new(m, &env, &b, &xi, &ex);
    let bl = BoundaryLedger::new(&[], &xi).unwrap();
    let mut ledger = GateLedger::new(0, b0);
    let a = m.action_id(action).unwrap();
    let d = gate_step(&mut ledger, &cfg(b0, order), &ctx, &bl, m.root(), a).unwrap();
    (d.verdict, ledger.budget, m.action_name(d.executed).to_string())
}

#[test]
fn gate_examples() {
    let m = ladder();
    let (v, b, _) = one_step(&m, 10.0, "small", vec![Fallback::Block]);
    assert_eq!(v, Verdict::Execute);
    assert!((b - 6.0).abs() < 1e-12);
    let (v, b, ex) = one_step(&m, 10.0, "big", vec![Fallback::Downgrade]);
    assert_eq!((v, b, ex.as_str()), (Verdict::Downgrade, 10.0, "safe"));
    let (v, b, ex) = one_step(&m, 0.0, "free", vec![Fallback::Block]);
    assert_eq!((v, b, ex.as_str()), (Verdict::Execute, 0.0, "free"));
    let (v, b, ex) = one_step(&m, 10.0, "big", vec![Fallback::Block]);
    assert_eq!((v, b, ex.as_str()), (Verdict::Block, 10.0, "noop"));
    let (v, _, ex) = one_step(&m, 10.0, "big", vec![Fallback::Escalate, Fallback::Block]);
    assert_eq!((v, ex.as_str()), (Verdict::EscalateDenied, "noop"));
}

#[test]
fn approval_never_lifts_the_budget() {
    let m = ladder();
    let env = exact_envelope(&m, &Policy::noop(&m), &SPEC, m.safe_defaults()).unwrap();
    let (b, xi, ex) = (vec![], BTreeMap::new(), ExposureMap::new());
    let ctx = GateContext::new(&m, &env, &b, &xi, &ex);
    let bl = BoundaryLedger::new(&[], &xi).unwrap();
    let mut c = cfg(10.0, vec![Fallback::Escalate, Fallback::Block]);
    c.approver.default = tollgate_core::gate::Approval::Approve;
    c.escalation_threshold = Some(1.0);
    let mut ledger = GateLedger::new(0, 10.0);
    let small = gate_step(&mut ledger, &c, &ctx, &bl, m.root(), m.action_id("small").unwrap()).unwrap();
    assert_eq!(small.verdict, Verdict::EscalateApproved);
    let big = gate_step(&mut ledger, &c, &ctx, &bl, m.root(), m.action_id("big").unwrap()).unwrap();
    assert_eq!(big.verdict, Verdict::Block);
    assert!((ledger.budget - 6.0).abs() < 1e-12);
}

fn wire_context() -> (EnvironmentModel, Envelope, Policy) {
    let inst = wire_transfer_witness().unwrap();
    let m = inst.ambiguity.models()[0].clone();
    let env = exact_envelope(&m, &inst.cont, &SPEC, m.safe_defaults()).unwrap();
    (m, env, inst.cont)
}

fn uniform_proposal(m: &EnvironmentModel) -> Policy {
    let rows: Vec<_> = m
        .nodes()
        .map(|n| {
            let acts = m.actions(n).unwrap();
            (n, acts.iter().map(|&a| (a, 1.0 / acts.len() as f64)).collect::<Vec<_>>())
        })
        .collect();
    Policy::new(m, rows).unwrap()
}

#[test]
fn zero_budget_only_executes_safe_defaults() {
    let (m, env, _) = wire_context();
    let (b, xi, ex) = (vec![], BTreeMap::new(), ExposureMap::new());
    let ctx = GateContext::new(&m, &env, &b, &xi, &ex);
    let proposal = uniform_proposal(&m);
    let c = cfg(0.0, vec![Fallback::Downgrade, Fallback::Block]);
    for e in 0..200 {
        let log = run_episode(&ctx, &proposal, &c, 9, e).unwrap();
        assert_eq!(log.final_budget(), 0.0);
        for r in &log.ledger.records {
            if r.envelope_value > 0.0 {
                assert_ne!(r.verdict, Verdict::Execute);
                assert_ne!(r.executed, r.proposed);
            }
        }
    }
}

#[test]
fn zero_toll_model_executes_everything() {
    // Every action lands on the same leaves as the no-op, so nothing is priced.
    let m = common::binomial_lattice(3, 0.4);
    let env = exact_envelope(&m, &Policy::noop(&m), &SPEC, m.safe_defaults()).unwrap();
    let (b, xi, ex) = (vec![], BTreeMap::new(), ExposureMap::new());
    let ctx = GateContext::new(&m, &env, &b, &xi, &ex);
    let log = run_episode(&ctx, &Policy::noop(&m), &cfg(5.0, vec![Fallback::Block]), 1, 0).unwrap();
    assert!(log.ledger.records.iter().all(|r| r.verdict == Verdict::Execute));
    assert_eq!(log.final_budget(), 5.0);
}

#[test]
fn exact_envelope_audit_has_no_overruns() {
    let (m, env, cont) = wire_context();
    let boundaries = vec![BoundarySpec {
        id: "funds".into(),
        dimension: 1,
        potential: PotentialSpec::Linear { weights: vec![0.01] },
        xi_policy: XiPolicy { sources: vec![], persistent: true },
    }];
    let xi = BTreeMap::new();
    let wire = m.action_id("wire_transfer").unwrap();
    let ex: ExposureMap = BTreeMap::from([(wire, vec![("funds".to_string(), vec![100.0])])]);
    let ctx = GateContext::new(&m, &env, &boundaries, &xi, &ex);
    let proposal = uniform_proposal(&m);
    let b0 = 5.0;
    let c = cfg(b0, vec![Fallback::Downgrade, Fallback::Block]);
    let logs: Vec<_> = (0..500).map(|e| run_episode(&ctx, &proposal, &c, 77, e).unwrap()).collect();
    let oracle = |node, a| Ok(counterfactual_toll(&m, node, a, &cont, &SPEC, m.safe_defaults())?.positive_toll);
    let report = audit_budget_guarantee(&m, &logs, &oracle, b0, 0.0).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.overruns, 0);
    assert_eq!(report.envelope_violations, 0);
    assert!(report.per_episode.iter().all(|e| e.executed_true_toll <= b0 + 1e-9));
    // Every executed wire transfer left a boundary increment behind.
    for log in &logs {
        let wires = log.ledger.records.iter().filter(|r| r.executed == "wire_transfer").count();
        assert_eq!(log.boundary_history.len(), wires);
        assert_eq!(log.ledger.records.last().unwrap().boundary_version, wires as u64);
    }

    let mut broken = logs[0].clone();
    broken.ledger.records[0].executed = "teleport".into();
    assert!(matches!(
        audit_budget_guarantee(&m, &[broken], &oracle, b0, 0.0),
        Err(Error::AuditMismatch(_))
    ));
}

#[test]
fn episodes_are_deterministic_and_order_free() {
    let (m, env, _) = wire_context();
    let (b, xi, ex) = (vec![], BTreeMap::new(), ExposureMap::new());
    let ctx = GateContext::new(&m, &env, &b, &xi, &ex);
    let proposal = uniform_proposal(&m);
    let c = cfg(3.0, vec![Fallback::Downgrade, Fallback::Escalate, Fallback::Block]);
    let forward: Vec<_> = (0..50).map(|e| run_episode(&ctx, &proposal, &c, 5, e).unwrap()).collect();
    let backward: Vec<_> = (0..50).rev().map(|e| run_episode(&ctx, &proposal, &c, 5, e).unwrap()).collect();
    for (a, b) in forward.iter().zip(backward.iter().rev()) {
        assert_eq!(a, b);
    }
    let other: Vec<_> = (0..50).map(|e| run_episode(&ctx, &proposal, &c, 6, e).unwrap()).collect();
    assert_ne!(forward, other);
}
