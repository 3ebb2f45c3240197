//! One-step conditional risk mappings and their backward-recursive composition.
//!
//! The dynamic risk process is `rho_T(X) = X` and
//! `rho_t(X) = sigma_t(rho_{t+1}(X))`, evaluated node by node on the tree
//! of histories. Three one-step mappings are provided: the conditional
//! expectation, the entropic mapping `gamma^-1 log E[exp(gamma Y)]`, and the
//! conditional expected shortfall at level `alpha`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    build_model, outcome_row, ActionSpec, EnvironmentModel, Intervention, ModelSpec, Node,
    NodeSpec, Policy, StateId, StateSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskSpec {
    Expectation,
    Entropic { gamma: f64 },
    ConditionalEs { alpha: f64 },
}

impl RiskSpec {
    pub fn entropic(gamma: f64) -> Result<Self> {
        let s = Self::Entropic { gamma };
        s.validate()?;
        Ok(s)
    }

    pub fn conditional_es(alpha: f64) -> Result<Self> {
        let s = Self::ConditionalEs { alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Expectation => Ok(()),
            Self::Entropic { gamma } if gamma.is_finite() && gamma > 0.0 => Ok(()),
            Self::Entropic { gamma } => Err(Error::InvalidRiskSpec(format!(
                "entropic gamma must be positive, got {gamma}"
            ))),
            Self::ConditionalEs { alpha } if alpha > 0.0 && alpha < 1.0 => Ok(()),
            Self::ConditionalEs { alpha } => Err(Error::InvalidRiskSpec(format!(
                "expected-shortfall alpha must lie in (0, 1), got {alpha}"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Expectation => "expectation".into(),
            Self::Entropic { gamma } => format!("entropic(gamma={gamma})"),
            Self::ConditionalEs { alpha } => format!("conditional_es(alpha={alpha})"),
        }
    }
}

/// Applies a one-step mapping to a finite distribution of `(value, probability)`
/// atoms. Atoms need not be sorted or merged; probabilities must sum to one.
pub fn one_step_risk(spec: &RiskSpec, atoms: &[(f64, f64)]) -> f64 {
    debug_assert!(!atoms.is_empty(), "risk of an empty distribution");
    match *spec {
        RiskSpec::Expectation => atoms.iter().map(|(y, p)| y * p).sum(),
        RiskSpec::Entropic { gamma } => entropic(gamma, atoms),
        RiskSpec::ConditionalEs { alpha } => expected_shortfall(alpha, atoms),
    }
}

/// Entropic mapping, always through the max-shifted log-sum-exp so that
/// large `gamma * y` cannot overflow.
fn entropic(gamma: f64, atoms: &[(f64, f64)]) -> f64 {
    let shift = atoms
        .iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(y, _)| *y)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = atoms
        .iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(y, p)| p * (gamma * (y - shift)).exp())
        .sum();
    shift + s.ln() / gamma
}

/// Average of the upper `1 - alpha` tail, splitting the boundary atom.
fn expected_shortfall(alpha: f64, atoms: &[(f64, f64)]) -> f64 {
    let tail = 1.0 - alpha;
    let mut sorted: Vec<(f64, f64)> = atoms.iter().copied().filter(|(_, p)| *p > 0.0).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut remaining = tail;
    let mut acc = 0.0;
    for (y, p) in sorted.iter().copied() {
        if remaining <= 0.0 {
            break;
        }
        let w = p.min(remaining);
        acc += w * y;
        remaining -= w;
    }
    if remaining > 0.0 {
        // Probabilities summed slightly below one; the rest sits on the minimum.
        acc += remaining * sorted.last().map_or(0.0, |a| a.0);
    }
    acc / tail
}

// ---------------------------------------------------------------------------
// Recursive evaluation
// ---------------------------------------------------------------------------

/// Values of the dynamic risk process at every node reachable from `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskValuation {
    root: Node,
    values: BTreeMap<Node, f64>,
}

impl RiskValuation {
    pub fn root(&self) -> Node {
        self.root
    }

    pub fn root_value(&self) -> f64 {
        self.values[&self.root]
    }

    /// Value at a reachable node; terminal nodes sit at `time == horizon`.
    pub fn value(&self, node: Node) -> Option<f64> {
        self.values.get(&node).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Node, f64)> + '_ {
        self.values.iter().map(|(n, v)| (*n, *v))
    }

    /// Reachable nodes at time `t`.
    pub fn layer(&self, t: usize) -> impl Iterator<Item = (Node, f64)> + '_ {
        self.iter().filter(move |(n, _)| n.time == t)
    }
}

/// Backward induction of `spec` under `do(iv.action)` then `cont`, with the
/// model's own terminal losses.
pub fn evaluate_dynamic_risk(
    model: &EnvironmentModel,
    iv: &Intervention,
    cont: &Policy,
    spec: &RiskSpec,
) -> Result<RiskValuation> {
    evaluate_dynamic_risk_with_losses(model, iv, cont, spec, &model.loss_vector())
}

/// As [`evaluate_dynamic_risk`], with terminal losses given per state index.
pub fn evaluate_dynamic_risk_with_losses(
    model: &EnvironmentModel,
    iv: &Intervention,
    cont: &Policy,
    spec: &RiskSpec,
    losses: &[f64],
) -> Result<RiskValuation> {
    backward(model, iv.node, Some(iv.action), cont, spec, losses)
}

/// Dynamic risk of following `cont` from the model root, without intervention.
pub fn evaluate_policy_risk(
    model: &EnvironmentModel,
    cont: &Policy,
    spec: &RiskSpec,
    losses: &[f64],
) -> Result<RiskValuation> {
    backward(model, model.root(), None, cont, spec, losses)
}

fn backward(
    model: &EnvironmentModel,
    root: Node,
    forced: Option<crate::ActionId>,
    cont: &Policy,
    spec: &RiskSpec,
    losses: &[f64],
) -> Result<RiskValuation> {
    spec.validate()?;
    let horizon = model.horizon();
    // Forward pass: reachable layers and their outcome rows.
    let mut rows: BTreeMap<Node, Vec<(StateId, f64)>> = BTreeMap::new();
    let mut layer = BTreeSet::from([root.state]);
    for time in root.time..horizon {
        let mut next = BTreeSet::new();
        for &s in &layer {
            let node = Node::new(time, s);
            let f = if node == root { forced } else { None };
            let row: Vec<_> = outcome_row(model, node, f, cont)?
                .into_iter()
                .filter(|(_, p)| *p > 0.0)
                .collect();
            next.extend(row.iter().map(|(t, _)| *t));
            rows.insert(node, row);
        }
        layer = next;
    }
    let mut values = BTreeMap::new();
    for s in layer {
        values.insert(Node::new(horizon, s), losses[s.0]);
    }
    for (node, row) in rows.iter().rev() {
        let atoms: Vec<(f64, f64)> = row
            .iter()
            .map(|(t, p)| (values[&Node::new(node.time + 1, *t)], *p))
            .collect();
        values.insert(*node, one_step_risk(spec, &atoms));
    }
    Ok(RiskValuation { root, values })
}

// ---------------------------------------------------------------------------
// Axiom fuzzing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axiom {
    Normalisation,
    Monotonicity,
    Locality,
    TranslationInvariance,
    Convexity,
    PositiveHomogeneity,
}

/// A distribution and the two sides of the failed comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomWitness {
    pub distribution: Vec<(f64, f64)>,
    pub detail: String,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomResult {
    pub axiom: Axiom,
    pub passed: bool,
    pub checked: usize,
    pub counterexample: Option<AxiomWitness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    pub spec: RiskSpec,
    pub trials: usize,
    /// Normalisation, monotonicity, locality, translation invariance, convexity.
    pub convex_axioms: Vec<AxiomResult>,
    pub positive_homogeneity: AxiomResult,
}

impl AxiomReport {
    pub fn convex_axioms_hold(&self) -> bool {
        self.convex_axioms.iter().all(|a| a.passed)
    }

    pub fn get(&self, axiom: Axiom) -> &AxiomResult {
        if axiom == Axiom::PositiveHomogeneity {
            return &self.positive_homogeneity;
        }
        self.convex_axioms.iter().find(|a| a.axiom == axiom).expect("all axioms present")
    }
}

/// Comparison tolerance for the fuzzer, relative to the magnitudes involved.
pub const AXIOM_TOL: f64 = 1e-9;

fn tol_for(vals: &[f64]) -> f64 {
    AXIOM_TOL * (1.0 + vals.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

struct Tracker {
    axiom: Axiom,
    checked: usize,
    witness: Option<AxiomWitness>,
}

impl Tracker {
    fn new(axiom: Axiom) -> Self {
        Self { axiom, checked: 0, witness: None }
    }

    fn record(&mut self, ok: bool, dist: &[(f64, f64)], detail: impl FnOnce() -> String, lhs: f64, rhs: f64) {
        self.checked += 1;
        if !ok && self.witness.is_none() {
            self.witness = Some(AxiomWitness { distribution: dist.to_vec(), detail: detail(), lhs, rhs });
        }
    }

    fn finish(self) -> AxiomResult {
        AxiomResult {
            axiom: self.axiom,
            passed: self.witness.is_none(),
            checked: self.checked,
            counterexample: self.witness,
        }
    }
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn with_values(probs: &[f64], values: &[f64]) -> Vec<(f64, f64)> {
    values.iter().copied().zip(probs.iter().copied()).collect()
}

/// Randomized property check of the convex-risk axioms plus a positive
/// homogeneity probe on finite distributions.
///
/// Locality is checked on a conditional mapping over a random partition:
/// the mapping is applied block by block and `sigma(1_A X) = 1_A sigma(X)` is
/// compared for a random union of blocks `A`.
pub fn check_axioms(spec: &RiskSpec, trials: usize, seed: u64) -> AxiomReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = |d: &[(f64, f64)]| one_step_risk(spec, d);
    let mut norm = Tracker::new(Axiom::Normalisation);
    let mut mono = Tracker::new(Axiom::Monotonicity);
    let mut local = Tracker::new(Axiom::Locality);
    let mut trans = Tracker::new(Axiom::TranslationInvariance);
    let mut conv = Tracker::new(Axiom::Convexity);
    let mut homo = Tracker::new(Axiom::PositiveHomogeneity);

    for _ in 0..trials.max(1) {
        let n = rng.gen_range(1..=6);
        let probs = random_probs(&mut rng, n);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..10.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..10.0)).collect();
        let x = with_values(&probs, &xs);

        let zero = with_values(&probs, &vec![0.0; n]);
        let v0 = sigma(&zero);
        norm.record(v0.abs() <= AXIOM_TOL, &zero, || "sigma(0) != 0".into(), v0, 0.0);

        let bumped: Vec<f64> = xs.iter().map(|v| v + rng.gen_range(0.0..3.0)).collect();
        let (a, b) = (sigma(&x), sigma(&with_values(&probs, &bumped)));
        mono.record(a <= b + tol_for(&[a, b]), &x, || format!("X <= Y pointwise, Y = {bumped:?}"), a, b);

        let m = rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = xs.iter().map(|v| v + m).collect();
        let (lhs, rhs) = (sigma(&with_values(&probs, &shifted)), sigma(&x) + m);
        trans.record(
            (lhs - rhs).abs() <= tol_for(&[lhs, rhs]),
            &x,
            || format!("m = {m}"),
            lhs,
            rhs,
        );

        let lambda: f64 = rng.gen();
        let mix: Vec<f64> = xs.iter().zip(&ys).map(|(u, v)| lambda * u + (1.0 - lambda) * v).collect();
        let y = with_values(&probs, &ys);
        let lhs = sigma(&with_values(&probs, &mix));
        let rhs = lambda * sigma(&x) + (1.0 - lambda) * sigma(&y);
        conv.record(lhs <= rhs + tol_for(&[lhs, rhs]), &x, || format!("lambda = {lambda}, Y = {ys:?}"), lhs, rhs);

        // Locality on a conditional mapping over 2..4 blocks.
        let blocks: Vec<Vec<(f64, f64)>> = (0..rng.gen_range(2..=4))
            .map(|_| {
                let k = rng.gen_range(1..=4);
                let p = random_probs(&mut rng, k);
                let v: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..10.0)).collect();
                with_values(&p, &v)
            })
            .collect();
        let in_a: Vec<bool> = blocks.iter().map(|_| rng.gen_bool(0.5)).collect();
        for (blk, &inside) in blocks.iter().zip(&in_a) {
            let masked: Vec<(f64, f64)> =
                blk.iter().map(|&(v, p)| (if inside { v } else { 0.0 }, p)).collect();
            let lhs = sigma(&masked);
            let rhs = if inside { sigma(blk) } else { 0.0 };
            local.record(
                (lhs - rhs).abs() <= tol_for(&[lhs, rhs]),
                blk,
                || format!("block inside A: {inside}"),
                lhs,
                rhs,
            );
        }

        let scale = rng.gen_range(0.0..3.0);
        let scaled: Vec<f64> = xs.iter().map(|v| scale * v).collect();
        let lhs = sigma(&with_values(&probs, &scaled));
        let rhs = scale * sigma(&x);
        homo.record(
            (lhs - rhs).abs() <= tol_for(&[lhs, rhs]),
            &x,
            || format!("lambda = {scale}"),
            lhs,
            rhs,
        );
    }

    AxiomReport {
        spec: *spec,
        trials: trials.max(1),
        convex_axioms: vec![norm.finish(), mono.finish(), local.finish(), trans.finish(), conv.finish()],
        positive_homogeneity: homo.finish(),
    }
}

// ---------------------------------------------------------------------------
// Naive stagewise expected shortfall
// ---------------------------------------------------------------------------

/// Two-stage instance on which stagewise expected shortfall and the static
/// expected shortfall of the terminal law order two losses oppositely.
#[derive(Debug, Clone)]
pub struct CvarDemo {
    pub alpha: f64,
    pub model: EnvironmentModel,
    /// Terminal losses of X and Y, indexed by state.
    pub loss_x: Vec<f64>,
    pub loss_y: Vec<f64>,
    /// Conditional ES at each time-1 node, in node order.
    pub stage_x: Vec<f64>,
    pub stage_y: Vec<f64>,
    pub static_x: f64,
    pub static_y: f64,
    pub recursive_x: f64,
    pub recursive_y: f64,
}

impl CvarDemo {
    /// `static_x - static_y` when every stage orders `X <= Y`.
    pub fn reversal_gap(&self) -> f64 {
        self.static_x - self.static_y
    }

    pub fn stagewise_dominated(&self) -> bool {
        self.stage_x.iter().zip(&self.stage_y).all(|(x, y)| x <= y)
    }

    pub fn recursive_reversed(&self) -> bool {
        self.stagewise_dominated() && self.recursive_x > self.recursive_y
    }
}

/// Summary of a stagewise-versus-root comparison under one mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderingCheck {
    /// `Some(true)` if every stage has `X <= Y`, `Some(false)` if every stage
    /// has `X >= Y`, `None` if mixed.
    pub stage_le: Option<bool>,
    pub root_x: f64,
    pub root_y: f64,
}

impl OrderingCheck {
    /// A reversal: all stages agree in one direction while the root disagrees.
    pub fn reversed(&self) -> bool {
        match self.stage_le {
            Some(true) => self.root_x > self.root_y,
            Some(false) => self.root_x < self.root_y,
            None => false,
        }
    }
}

/// Compares stagewise values of `spec` at time 1 with a root value produced
/// either recursively or statically from the terminal law.
pub fn ordering_check(demo: &CvarDemo, spec: &RiskSpec, recursive: bool) -> Result<OrderingCheck> {
    let cont = Policy::noop(&demo.model);
    let iv = Intervention::new(&demo.model, demo.model.root(), demo.model.noop())?;
    let vx = evaluate_dynamic_risk_with_losses(&demo.model, &iv, &cont, spec, &demo.loss_x)?;
    let vy = evaluate_dynamic_risk_with_losses(&demo.model, &iv, &cont, spec, &demo.loss_y)?;
    let sx: Vec<f64> = vx.layer(1).map(|(_, v)| v).collect();
    let sy: Vec<f64> = vy.layer(1).map(|(_, v)| v).collect();
    let le = sx.iter().zip(&sy).all(|(a, b)| a <= b);
    let ge = sx.iter().zip(&sy).all(|(a, b)| a >= b);
    let stage_le = match (le, ge) {
        (true, _) => Some(true),
        (false, true) => Some(false),
        _ => None,
    };
    let (root_x, root_y) = if recursive {
        (vx.root_value(), vy.root_value())
    } else {
        let law = crate::mdp::terminal_state_law(&demo.model, &iv, &cont)?;
        let ax: Vec<(f64, f64)> = law.iter().map(|(s, p)| (demo.loss_x[s.0], *p)).collect();
        let ay: Vec<(f64, f64)> = law.iter().map(|(s, p)| (demo.loss_y[s.0], *p)).collect();
        (one_step_risk(spec, &ax), one_step_risk(spec, &ay))
    };
    Ok(OrderingCheck { stage_le, root_x, root_y })
}

/// Builds the two-stage tree `root -> {up, down} -> {hi, lo}` with equal
/// branch probabilities, used by the stagewise expected-shortfall example.
pub fn two_stage_tree() -> EnvironmentModel {
    let leaves = ["up_hi", "up_lo", "down_hi", "down_lo"];
    let mut states = vec!["root", "up", "down"];
    states.extend(leaves);
    let row = |a: &str, b: &str| ActionSpec {
        action: "noop".into(),
        next: vec![(a.into(), 0.5), (b.into(), 0.5)],
    };
    let spec = ModelSpec {
        horizon: 2,
        components: vec![],
        states: states.iter().map(|s| StateSpec { id: (*s).into(), values: vec![] }).collect(),
        initial_state: "root".into(),
        noop: "noop".into(),
        nodes: vec![
            NodeSpec { time: 0, state: "root".into(), actions: vec![row("up", "down")] },
            NodeSpec { time: 1, state: "up".into(), actions: vec![row("up_hi", "up_lo")] },
            NodeSpec { time: 1, state: "down".into(), actions: vec![row("down_hi", "down_lo")] },
        ],
        terminal_loss: leaves.iter().map(|s| ((*s).to_string(), 0.0)).collect(),
        safe_defaults: vec![],
        categories: BTreeMap::new(),
    };
    build_model(&spec).expect("fixed tree is valid")
}

/// Losses on [`two_stage_tree`] leaves in the order `up_hi, up_lo, down_hi, down_lo`.
pub fn two_stage_losses(model: &EnvironmentModel, leaf_losses: [f64; 4]) -> Vec<f64> {
    let mut v = vec![0.0; model.num_states()];
    for (name, loss) in ["up_hi", "up_lo", "down_hi", "down_lo"].iter().zip(leaf_losses) {
        v[model.state_id(name).expect("leaf exists").0] = loss;
    }
    v
}

/// The built-in reversal at `alpha = 0.5`.
///
/// X is 9.5 on the up branch and 0.9 on the down branch; Y is 10 or 0 on the
/// up branch and 1 or 0 on the down branch. Stagewise, X never exceeds Y, but
/// the static tail of X is concentrated while the tail of Y is diluted across
/// branches, so the static shortfall ranks X above Y by 4.0.
pub fn cvar_inconsistency_demo() -> CvarDemo {
    let alpha = 0.5;
    let model = two_stage_tree();
    let loss_x = two_stage_losses(&model, [9.5, 9.5, 0.9, 0.9]);
    let loss_y = two_stage_losses(&model, [10.0, 0.0, 1.0, 0.0]);
    let spec = RiskSpec::ConditionalEs { alpha };
    let mut demo = CvarDemo {
        alpha,
        model,
        loss_x,
        loss_y,
        stage_x: vec![],
        stage_y: vec![],
        static_x: 0.0,
        static_y: 0.0,
        recursive_x: 0.0,
        recursive_y: 0.0,
    };
    let stat = ordering_check(&demo, &spec, false).expect("fixed instance evaluates");
    let rec = ordering_check(&demo, &spec, true).expect("fixed instance evaluates");
    let cont = Policy::noop(&demo.model);
    let iv = Intervention::new(&demo.model, demo.model.root(), demo.model.noop()).expect("root");
    let vx = evaluate_dynamic_risk_with_losses(&demo.model, &iv, &cont, &spec, &demo.loss_x).expect("eval");
    let vy = evaluate_dynamic_risk_with_losses(&demo.model, &iv, &cont, &spec, &demo.loss_y).expect("eval");
    demo.stage_x = vx.layer(1).map(|(_, v)| v).collect();
    demo.stage_y = vy.layer(1).map(|(_, v)| v).collect();
    demo.static_x = stat.root_x;
    demo.static_y = stat.root_y;
    demo.recursive_x = rec.root_x;
    demo.recursive_y = rec.root_y;
    demo
}

// ---------------------------------------------------------------------------
// Time consistency
// ---------------------------------------------------------------------------

/// Slack allowed in the conclusion of the time-consistency implication.
pub const CONSISTENCY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyViolation {
    pub premise_time: usize,
    pub node: Node,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsistencyCheck {
    /// Layers `s` whose premise `rho_s(X) <= rho_s(Y)` held at every reachable node.
    pub premises_held: usize,
    /// Earlier `(s, node)` pairs at which the conclusion was checked.
    pub pairs_checked: usize,
    pub violations: Vec<ConsistencyViolation>,
}

/// For every layer `s` where `rho_s(X) <= rho_s(Y)` at all reachable nodes,
/// checks `rho_t(X) <= rho_t(Y)` at every reachable node with `t < s`.
pub fn check_time_consistency(
    model: &EnvironmentModel,
    cont: &Policy,
    spec: &RiskSpec,
    loss_x: &[f64],
    loss_y: &[f64],
) -> Result<ConsistencyCheck> {
    let vx = evaluate_policy_risk(model, cont, spec, loss_x)?;
    let vy = evaluate_policy_risk(model, cont, spec, loss_y)?;
    let mut out = ConsistencyCheck::default();
    for s in 1..=model.horizon() {
        let premise = vx.layer(s).all(|(n, x)| x <= vy.values[&n]);
        if !premise {
            continue;
        }
        out.premises_held += 1;
        for (node, x) in vx.iter().filter(|(n, _)| n.time < s) {
            let y = vy.values[&node];
            out.pairs_checked += 1;
            if x > y + CONSISTENCY_TOL * (1.0 + y.abs()) {
                out.violations.push(ConsistencyViolation { premise_time: s, node, x, y });
            }
        }
    }
    Ok(out)
}
