//! Underwriting boundaries, exposure potentials and boundary tolls.
//!
//! A boundary carries a cumulative exposure vector `E`. The toll of an
//! increment is `Phi(E + dE) - Phi(E)` for a monotone potential `Phi` with
//! `Phi(0) = 0`, so the total toll of any split of an exposure telescopes.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    build_model, ActionSpec, ComponentSpec, Intervention, ModelSpec, NodeSpec, Policy, StateSpec,
};
use crate::oracle::{compositions, EnumerationBudget};
use crate::risk::{evaluate_dynamic_risk, RiskSpec};

/// Telescoping and partition-sum tolerance.
pub const TELESCOPE_TOL: f64 = 1e-9;
/// Partitions must reproduce the declared total to this precision.
pub const PARTITION_TOL: f64 = 1e-12;
/// Monotonicity probes tolerate this much rounding.
const PROBE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub at: f64,
    pub slope: f64,
}

/// Potential family. Piecewise-convex coordinates are `sum_k slope_k * max(x - at_k, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialSpec {
    Linear { weights: Vec<f64> },
    Power { weights: Vec<f64>, exponent: f64 },
    PiecewiseConvex { knots: Vec<Vec<Knot>> },
}

impl PotentialSpec {
    pub fn dimension(&self) -> usize {
        match self {
            Self::Linear { weights } | Self::Power { weights, .. } => weights.len(),
            Self::PiecewiseConvex { knots } => knots.len(),
        }
    }

    fn eval(&self, e: &[f64]) -> f64 {
        match self {
            Self::Linear { weights } => weights.iter().zip(e).map(|(c, x)| c * x).sum(),
            Self::Power { weights, exponent } => {
                weights.iter().zip(e).map(|(c, x)| c * x.powf(*exponent)).sum()
            }
            Self::PiecewiseConvex { knots } => knots
                .iter()
                .zip(e)
                .map(|(ks, x)| ks.iter().map(|k| k.slope * (x - k.at).max(0.0)).sum::<f64>())
                .sum(),
        }
    }

    fn probe_scale(&self) -> f64 {
        match self {
            Self::PiecewiseConvex { knots } => {
                let top = knots.iter().flatten().map(|k| k.at).fold(0.0, f64::max);
                (2.0 * top).max(10.0)
            }
            _ => 10.0,
        }
    }
}

/// A potential that has passed (or deliberately skipped) validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    spec: PotentialSpec,
}

impl Potential {
    /// Validates parameters, then `Phi(0) = 0` and monotonicity on a probe grid.
    pub fn new(spec: PotentialSpec) -> Result<Self> {
        let d = spec.dimension();
        if d == 0 {
            return Err(Error::InvalidPotential("dimension must be at least 1".into()));
        }
        let ok = match &spec {
            PotentialSpec::Linear { weights } => weights.iter().all(|w| w.is_finite()),
            PotentialSpec::Power { weights, exponent } => {
                if !(exponent.is_finite() && *exponent >= 1.0) {
                    return Err(Error::InvalidPotential(format!("exponent {exponent} is below 1")));
                }
                weights.iter().all(|w| w.is_finite())
            }
            PotentialSpec::PiecewiseConvex { knots } => {
                if knots.iter().flatten().any(|k| k.at < 0.0) {
                    return Err(Error::InvalidPotential("knots must sit at nonnegative exposure".into()));
                }
                knots.iter().flatten().all(|k| k.at.is_finite() && k.slope.is_finite())
            }
        };
        if !ok {
            return Err(Error::InvalidPotential("parameters must be finite".into()));
        }
        let pot = Self { spec };
        pot.probe()?;
        Ok(pot)
    }

    /// Skips validation. Used to inject faulty potentials into the verifiers.
    pub fn unchecked(spec: PotentialSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &PotentialSpec {
        &self.spec
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension()
    }

    pub fn eval(&self, e: &[f64]) -> f64 {
        self.spec.eval(e)
    }

    fn probe(&self) -> Result<()> {
        let d = self.dimension();
        let zero = self.eval(&vec![0.0; d]);
        if zero.abs() > PROBE_TOL {
            return Err(Error::InvalidPotential(format!("Phi(0) = {zero}, expected 0")));
        }
        let scale = self.spec.probe_scale();
        const STEPS: usize = 64;
        for i in 0..d {
            for base in [0.0, 0.37, 1.0] {
                let mut x = vec![base * scale; d];
                x[i] = 0.0;
                let mut prev = self.eval(&x);
                for k in 1..=STEPS {
                    x[i] = scale * k as f64 / STEPS as f64;
                    let cur = self.eval(&x);
                    if cur < prev - PROBE_TOL * (1.0 + prev.abs()) {
                        return Err(Error::InvalidPotential(format!(
                            "decreasing in component {i} near exposure {:?}",
                            x
                        )));
                    }
                    prev = cur;
                }
            }
        }
        Ok(())
    }
}

/// How the outside-state tag of a boundary is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiPolicy {
    /// Scenario variables folded into the tag.
    pub sources: Vec<String>,
    /// The tag survives splits and sessions; must be `true`.
    pub persistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub id: String,
    pub dimension: usize,
    pub potential: PotentialSpec,
    pub xi_policy: XiPolicy,
}

impl BoundarySpec {
    pub fn validate(&self) -> Result<Potential> {
        if self.dimension == 0 {
            return Err(Error::InvalidBoundary(format!("boundary '{}' has dimension 0", self.id)));
        }
        if self.potential.dimension() != self.dimension {
            return Err(Error::InvalidBoundary(format!(
                "boundary '{}' declares dimension {} but its potential has {}",
                self.id,
                self.dimension,
                self.potential.dimension()
            )));
        }
        if !self.xi_policy.persistent {
            return Err(Error::InvalidBoundary(format!(
                "boundary '{}': the outside-state tag must persist across splits",
                self.id
            )));
        }
        Potential::new(self.potential.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryState {
    pub boundary: String,
    pub exposure: Vec<f64>,
    pub xi: String,
    pub version: u64,
}

impl BoundaryState {
    pub fn new(boundary: &str, dimension: usize, xi: &str) -> Self {
        Self { boundary: boundary.into(), exposure: vec![0.0; dimension], xi: xi.into(), version: 0 }
    }
}

fn check_increment(dimension: usize, inc: &[f64]) -> Result<()> {
    if inc.len() != dimension {
        return Err(Error::DimensionMismatch { expected: dimension, got: inc.len() });
    }
    if let Some((index, &value)) = inc.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::NegativeIncrement { index, value });
    }
    Ok(())
}

fn shifted(e: &[f64], inc: &[f64]) -> Vec<f64> {
    e.iter().zip(inc).map(|(a, b)| a + b).collect()
}

/// `Phi(E + dE) - Phi(E)`; the state is not touched.
pub fn boundary_toll(state: &BoundaryState, increment: &[f64], pot: &Potential) -> Result<f64> {
    check_increment(state.exposure.len(), increment)?;
    if pot.dimension() != state.exposure.len() {
        return Err(Error::DimensionMismatch { expected: state.exposure.len(), got: pot.dimension() });
    }
    Ok(pot.eval(&shifted(&state.exposure, increment)) - pot.eval(&state.exposure))
}

/// Returns the state after adding `increment`, with the version bumped.
pub fn apply_increment(state: &BoundaryState, increment: &[f64]) -> Result<BoundaryState> {
    check_increment(state.exposure.len(), increment)?;
    Ok(BoundaryState {
        boundary: state.boundary.clone(),
        exposure: shifted(&state.exposure, increment),
        xi: state.xi.clone(),
        version: state.version + 1,
    })
}

/// One applied increment, as exported to run logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub boundary: String,
    pub version: u64,
    pub exposure: Vec<f64>,
    pub xi: String,
}

#[derive(Debug)]
struct Slot {
    potential: Potential,
    state: BoundaryState,
}

/// Exposure ledger with one lock per boundary and optimistic versioning.
///
/// Quotes read an `(E, version)` snapshot; a commit carrying a stale version
/// is rejected, so an increment can never land on exposure it was not priced
/// against.
#[derive(Debug)]
pub struct BoundaryLedger {
    slots: BTreeMap<String, Mutex<Slot>>,
    history: Mutex<Vec<LedgerRecord>>,
}

impl BoundaryLedger {
    /// `xi` maps boundary ids to their outside-state tags; missing ids get "".
    pub fn new(specs: &[BoundarySpec], xi: &BTreeMap<String, String>) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for s in specs {
            let potential = s.validate()?;
            let tag = xi.get(&s.id).map_or("", String::as_str);
            let slot = Slot { potential, state: BoundaryState::new(&s.id, s.dimension, tag) };
            if slots.insert(s.id.clone(), Mutex::new(slot)).is_some() {
                return Err(Error::InvalidBoundary(format!("duplicate boundary '{}'", s.id)));
            }
        }
        Ok(Self { slots, history: Mutex::new(Vec::new()) })
    }

    fn slot(&self, id: &str) -> Result<&Mutex<Slot>> {
        self.slots.get(id).ok_or_else(|| Error::UnknownBoundary(id.into()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn snapshot(&self, id: &str) -> Result<BoundaryState> {
        Ok(self.slot(id)?.lock().expect("ledger lock").state.clone())
    }

    /// Boundary toll of `increment` and the version it was priced at.
    pub fn quote(&self, id: &str, increment: &[f64]) -> Result<(f64, u64)> {
        let slot = self.slot(id)?.lock().expect("ledger lock");
        Ok((boundary_toll(&slot.state, increment, &slot.potential)?, slot.state.version))
    }

    /// Applies `increment` if the boundary is still at `expected_version`.
    pub fn commit(&self, id: &str, increment: &[f64], expected_version: u64) -> Result<BoundaryState> {
        let mut slot = self.slot(id)?.lock().expect("ledger lock");
        if slot.state.version != expected_version {
            return Err(Error::VersionConflict {
                boundary: id.into(),
                expected: expected_version,
                found: slot.state.version,
            });
        }
        let next = apply_increment(&slot.state, increment)?;
        self.history.lock().expect("history lock").push(LedgerRecord {
            boundary: id.into(),
            version: next.version,
            exposure: next.exposure.clone(),
            xi: next.xi.clone(),
        });
        slot.state = next.clone();
        Ok(next)
    }

    pub fn history(&self) -> Vec<LedgerRecord> {
        self.history.lock().expect("history lock").clone()
    }
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitViolation {
    pub index: usize,
    pub sequence: Vec<Vec<f64>>,
    /// Raw sum of step tolls.
    pub sum: f64,
    /// Sum of step tolls clamped at zero, as a runtime would charge them.
    pub charged: f64,
    pub min_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplittingReport {
    /// `Phi(E0 + total) - Phi(E0)`.
    pub expected: f64,
    pub sums: Vec<f64>,
    pub charged: Vec<f64>,
    pub violations: Vec<SplitViolation>,
}

impl SplittingReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn evaluate_split(pot: &Potential, e0: &[f64], seq: &[Vec<f64>]) -> (f64, f64, f64) {
    let mut e = e0.to_vec();
    let (mut sum, mut charged, mut min_step) = (0.0, 0.0, f64::INFINITY);
    for inc in seq {
        let next = shifted(&e, inc);
        let step = pot.eval(&next) - pot.eval(&e);
        sum += step;
        charged += step.max(0.0);
        min_step = min_step.min(step);
        e = next;
    }
    (sum, charged, min_step)
}

/// Checks that every ordered split of `total` pays `Phi(E0 + total) - Phi(E0)`.
///
/// A split violates the identity when its raw or zero-clamped toll sum misses
/// the telescoped value by more than [`TELESCOPE_TOL`], or when a step toll is
/// negative.
pub fn splitting_invariance_check(
    pot: &Potential,
    e0: &[f64],
    total: &[f64],
    partitions: &[Vec<Vec<f64>>],
) -> Result<SplittingReport> {
    let d = pot.dimension();
    check_increment(d, e0)?;
    check_increment(d, total)?;
    for (index, seq) in partitions.iter().enumerate() {
        let mut sum = vec![0.0; d];
        for inc in seq {
            check_increment(d, inc)?;
            for (s, x) in sum.iter_mut().zip(inc) {
                *s += x;
            }
        }
        if sum.iter().zip(total).any(|(s, t)| (s - t).abs() > PARTITION_TOL * (1.0 + t.abs())) {
            return Err(Error::PartitionSum { index, sum, total: total.to_vec() });
        }
    }
    let expected = pot.eval(&shifted(e0, total)) - pot.eval(e0);
    let mut report = SplittingReport { expected, sums: vec![], charged: vec![], violations: vec![] };
    for (index, seq) in partitions.iter().enumerate() {
        let (sum, charged, min_step) = evaluate_split(pot, e0, seq);
        report.sums.push(sum);
        report.charged.push(charged);
        let bad = (sum - expected).abs() > TELESCOPE_TOL
            || (charged - expected).abs() > TELESCOPE_TOL
            || min_step < -PROBE_TOL;
        if bad {
            report.violations.push(SplitViolation { index, sequence: seq.clone(), sum, charged, min_step });
        }
    }
    Ok(report)
}

/// A random ordered split of `total` into at most `max_pieces` nonnegative
/// increments; the last piece absorbs rounding so the sum is exact.
pub fn random_partition<R: Rng>(rng: &mut R, total: &[f64], max_pieces: usize) -> Vec<Vec<f64>> {
    let pieces = rng.gen_range(1..=max_pieces.max(1));
    let mut rest = total.to_vec();
    let mut out = Vec::with_capacity(pieces);
    for k in 0..pieces {
        if k + 1 == pieces {
            out.push(rest.iter().map(|x| x.max(0.0)).collect());
            break;
        }
        let share: Vec<f64> = rest
            .iter()
            .map(|r| {
                // Mix coarse and fine granularity, including empty pieces.
                let u: f64 = match rng.gen_range(0..4) {
                    0 => 0.0,
                    1 => rng.gen_range(0.0..0.1),
                    _ => rng.gen_range(0.0..1.0),
                };
                r * u
            })
            .collect();
        for (r, s) in rest.iter_mut().zip(&share) {
            *r -= s;
        }
        out.push(share);
    }
    out
}

/// A random valid potential of dimension `d`: linear, power with exponent in
/// `[1, 3)`, or piecewise convex with nonnegative slopes.
pub fn random_potential_spec<R: Rng>(rng: &mut R, d: usize) -> PotentialSpec {
    let weights: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..3.0)).collect();
    match rng.gen_range(0..3) {
        0 => PotentialSpec::Linear { weights },
        1 => PotentialSpec::Power { weights, exponent: rng.gen_range(1.0..3.0) },
        _ => PotentialSpec::PiecewiseConvex {
            knots: (0..d)
                .map(|_| {
                    let mut at = 0.0;
                    (0..rng.gen_range(1..=4))
                        .map(|_| {
                            let k = Knot { at, slope: rng.gen_range(0.0..2.0) };
                            at += rng.gen_range(0.0..3.0);
                            k
                        })
                        .collect()
                })
                .collect(),
        },
    }
}

/// Searches random orderings and granularities for a split that breaks the
/// telescoping identity. Returns the full report over the tried splits.
pub fn adversarial_split_search<R: Rng>(
    rng: &mut R,
    pot: &Potential,
    e0: &[f64],
    total: &[f64],
    trials: usize,
    max_pieces: usize,
) -> Result<SplittingReport> {
    let partitions: Vec<Vec<Vec<f64>>> =
        (0..trials).map(|_| random_partition(rng, total, max_pieces)).collect();
    splitting_invariance_check(pot, e0, total, &partitions)
}

// ---------------------------------------------------------------------------
// Path-dependent losses
// ---------------------------------------------------------------------------

/// Payments below this size count as small.
pub const SMALL_PAYMENT: usize = 2;

/// Payment chain whose loss under fraud is `E_T + kappa * (number of small
/// payments)`. The second term depends on how the exposure was split, which
/// breaks the assumption that loss depends on the boundary only through `E`.
pub fn payment_chain_spec(sizes: &[usize], kappa: f64, fraud: f64) -> ModelSpec {
    let n = sizes.len();
    let mut states = vec![];
    let mut nodes = vec![];
    let mut exposure = 0usize;
    let mut small = 0usize;
    let state = |id: String, values: Vec<i64>| StateSpec { id, values };
    let step = |action: &str, target: &str| ActionSpec { action: action.into(), next: vec![(target.into(), 1.0)] };
    for t in 0..=n {
        states.push(state(format!("p{t}"), vec![exposure as i64, small as i64]));
        states.push(state(format!("idle{t}"), vec![0, 0]));
        if t < n {
            nodes.push(NodeSpec {
                time: t,
                state: format!("p{t}"),
                actions: vec![step("noop", &format!("idle{}", t + 1)), step("pay", &format!("p{}", t + 1))],
            });
            if t > 0 {
                nodes.push(NodeSpec {
                    time: t,
                    state: format!("idle{t}"),
                    actions: vec![step("noop", &format!("idle{}", t + 1))],
                });
            }
            let size = sizes.get(t).copied().unwrap_or(0);
            exposure += size;
            small += usize::from(size < SMALL_PAYMENT);
        }
    }
    let resolve = |from: &str, hit: &str, miss: &str| NodeSpec {
        time: n,
        state: from.into(),
        actions: vec![ActionSpec {
            action: "noop".into(),
            next: vec![(hit.into(), fraud), (miss.into(), 1.0 - fraud)],
        }],
    };
    nodes.push(resolve(&format!("p{n}"), "fraud", "clean"));
    nodes.push(resolve(&format!("idle{n}"), "idle_fraud", "idle_clean"));
    for id in ["fraud", "clean"] {
        states.push(state(id.into(), vec![exposure as i64, small as i64]));
    }
    for id in ["idle_fraud", "idle_clean"] {
        states.push(state(id.into(), vec![0, 0]));
    }
    let loss = exposure as f64 + kappa * small as f64;
    ModelSpec {
        horizon: n + 1,
        components: vec![
            ComponentSpec { name: "exposure".into(), external: true },
            ComponentSpec { name: "small_payments".into(), external: true },
        ],
        states,
        initial_state: "p0".into(),
        noop: "noop".into(),
        nodes,
        terminal_loss: BTreeMap::from([
            ("fraud".into(), loss),
            ("clean".into(), 0.0),
            ("idle_fraud".into(), 0.0),
            ("idle_clean".into(), 0.0),
        ]),
        safe_defaults: vec![],
        categories: BTreeMap::new(),
    }
}

/// Root risk of executing the whole payment sequence minus the risk of
/// executing none of it.
pub fn sequence_true_toll(sizes: &[usize], kappa: f64, fraud: f64, spec: &RiskSpec) -> Result<f64> {
    if sizes.is_empty() {
        return Ok(0.0);
    }
    let model = build_model(&payment_chain_spec(sizes, kappa, fraud))?;
    let pay = model.action_id("pay")?;
    let cont = Policy::deterministic(&model, |_, acts| *acts.last().expect("nonempty"))?;
    let root = model.root();
    let risk = |a| -> Result<f64> {
        let iv = Intervention::new(&model, root, a)?;
        Ok(evaluate_dynamic_risk(&model, &iv, &cont, spec)?.root_value())
    };
    Ok(risk(pay)? - risk(model.noop())?)
}

/// Largest spread of true tolls among splits of `total` (at most
/// `max_parts` payments) that share the same boundary exposure. With
/// `two_dim` the exposure also counts small payments.
pub fn max_spread_by_exposure(
    total: usize,
    max_parts: usize,
    kappa: f64,
    fraud: f64,
    spec: &RiskSpec,
    two_dim: bool,
) -> Result<f64> {
    let mut groups: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for seq in compositions(total, max_parts, &EnumerationBudget::default())? {
        let small = if two_dim { seq.iter().filter(|&&s| s < SMALL_PAYMENT).count() } else { 0 };
        let toll = sequence_true_toll(&seq, kappa, fraud, spec)?;
        let g = groups.entry((total, small)).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        g.0 = g.0.min(toll);
        g.1 = g.1.max(toll);
    }
    Ok(groups.values().map(|(lo, hi)| hi - lo).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathDependenceReport {
    pub kappa: f64,
    pub fraud: f64,
    pub risk_spec: RiskSpec,
    pub potential: PotentialSpec,
    pub sequences: [Vec<usize>; 2],
    pub lambda_sums: [f64; 2],
    pub true_tolls: [f64; 2],
    pub gap: f64,
    /// Largest within-group spread once small payments are a second exposure dimension.
    pub redesigned_max_spread: f64,
    /// Largest within-group spread with `kappa = 0`, where loss depends only on `E`.
    pub assumption_max_spread: f64,
}

/// Two payment splits with equal terminal exposure whose true tolls differ
/// because small payments carry extra fraud loss. The boundary potential
/// charges both the same.
pub fn path_dependence_counterexample() -> PathDependenceReport {
    let (kappa, fraud) = (1.0, 0.1);
    let spec = RiskSpec::Entropic { gamma: 0.5 };
    let potential = PotentialSpec::Power { weights: vec![1.0], exponent: 2.0 };
    let pot = Potential::new(potential.clone()).expect("valid potential");
    let sequences = [vec![2], vec![1, 1]];
    let lambda = |seq: &[usize]| {
        let incs: Vec<Vec<f64>> = seq.iter().map(|&s| vec![s as f64]).collect();
        evaluate_split(&pot, &[0.0], &incs).0
    };
    let toll = |seq: &[usize]| sequence_true_toll(seq, kappa, fraud, &spec).expect("built-in chain");
    let lambda_sums = [lambda(&sequences[0]), lambda(&sequences[1])];
    let true_tolls = [toll(&sequences[0]), toll(&sequences[1])];
    let spread = |k: f64, two_dim: bool| {
        (1..=4)
            .map(|total| max_spread_by_exposure(total, 4, k, fraud, &spec, two_dim).expect("small search"))
            .fold(0.0, f64::max)
    };
    PathDependenceReport {
        kappa,
        fraud,
        risk_spec: spec,
        potential,
        gap: (true_tolls[1] - true_tolls[0]).abs(),
        sequences,
        lambda_sums,
        true_tolls,
        redesigned_max_spread: spread(kappa, true),
        assumption_max_spread: spread(0.0, false),
    }
}
