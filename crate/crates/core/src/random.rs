//! Seeded generators of random tree models, policies and ambiguity sets.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::Result;
use crate::instances::{payment_instance, PaymentParams, WitnessInstance};
use crate::mdp::{
    build_model, ActionId, ActionSpec, ComponentSpec, EnvironmentModel, ModelSpec, Node, NodeSpec,
    Policy, SafeDefaultEntry, StateId, StateSpec,
};
use crate::risk::{evaluate_policy_risk, RiskSpec};
use crate::toll::AmbiguitySet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub max_branching: usize,
    /// Side-effect-bearing actions per node on top of the no-op.
    pub max_extra_actions: usize,
    /// Leaf losses are multiples of 0.5 in `[0, max_loss]`.
    pub max_loss: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { max_depth: 6, max_branching: 3, max_extra_actions: 2, max_loss: 10.0 }
    }
}

fn random_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // Put the rounding residue on the last entry so the row sums to one.
    let head: f64 = row[..n - 1].iter().sum();
    row[n - 1] = 1.0 - head;
    row
}

/// A random tree. Every node's actions share the node's children and differ
/// only in their kernel rows; the child index is the single external
/// component, and every extra action maps to the no-op as its safe default.
pub fn random_tree_spec<R: Rng>(rng: &mut R, cfg: &TreeConfig) -> ModelSpec {
    let horizon = rng.gen_range(1..=cfg.max_depth.max(1));
    let extra = rng.gen_range(0..=cfg.max_extra_actions);
    let action_names: Vec<String> = (1..=extra).map(|k| format!("a{k}")).collect();
    let mut states = vec![StateSpec { id: "r".into(), values: vec![0] }];
    let mut nodes = Vec::new();
    let mut terminal_loss = BTreeMap::new();
    let mut layer = vec!["r".to_string()];
    for t in 0..horizon {
        let mut next_layer = Vec::new();
        for parent in &layer {
            let b = rng.gen_range(1..=cfg.max_branching.max(1));
            let children: Vec<String> = (0..b).map(|k| format!("{parent}.{k}")).collect();
            for (k, c) in children.iter().enumerate() {
                states.push(StateSpec { id: c.clone(), values: vec![k as i64] });
                if t + 1 == horizon {
                    let steps = (cfg.max_loss * 2.0).round() as u32;
                    terminal_loss.insert(c.clone(), f64::from(rng.gen_range(0..=steps)) * 0.5);
                }
            }
            let mut actions = Vec::new();
            for name in std::iter::once(&"noop".to_string()).chain(&action_names) {
                let row = random_row(rng, b);
                actions.push(ActionSpec {
                    action: name.clone(),
                    next: children.iter().cloned().zip(row).collect(),
                });
            }
            nodes.push(NodeSpec { time: t, state: parent.clone(), actions });
            next_layer.extend(children);
        }
        layer = next_layer;
    }
    ModelSpec {
        horizon,
        components: vec![ComponentSpec { name: "branch".into(), external: true }],
        states,
        initial_state: "r".into(),
        noop: "noop".into(),
        nodes,
        terminal_loss,
        safe_defaults: action_names
            .iter()
            .map(|a| SafeDefaultEntry { action: a.clone(), default: "noop".into(), time: None, state: None })
            .collect(),
        categories: BTreeMap::new(),
    }
}

pub fn random_tree<R: Rng>(rng: &mut R, cfg: &TreeConfig) -> Result<EnvironmentModel> {
    build_model(&random_tree_spec(rng, cfg))
}

/// Redraws every kernel row of `spec`, keeping supports, states and losses.
pub fn perturb_kernels<R: Rng>(rng: &mut R, spec: &ModelSpec) -> ModelSpec {
    let mut out = spec.clone();
    for n in &mut out.nodes {
        for a in &mut n.actions {
            let row = random_row(rng, a.next.len());
            for ((_, p), q) in a.next.iter_mut().zip(row) {
                *p = q;
            }
        }
    }
    out
}

/// `n_models` random models sharing one random skeleton.
pub fn random_ambiguity_set<R: Rng>(rng: &mut R, cfg: &TreeConfig, n_models: usize) -> Result<AmbiguitySet> {
    let base = random_tree_spec(rng, cfg);
    let mut models = vec![build_model(&base)?];
    for _ in 1..n_models {
        models.push(build_model(&perturb_kernels(rng, &base))?);
    }
    AmbiguitySet::new(models)
}

/// A random Markov policy; with probability one half it is deterministic.
pub fn random_policy<R: Rng>(rng: &mut R, model: &EnvironmentModel) -> Result<Policy> {
    let deterministic = rng.gen_bool(0.5);
    let mut rows = Vec::new();
    for node in model.nodes() {
        let actions = model.actions(node)?;
        let row: Vec<(ActionId, f64)> = if deterministic {
            vec![(actions[rng.gen_range(0..actions.len())], 1.0)]
        } else {
            actions.iter().copied().zip(random_row(rng, actions.len())).collect()
        };
        rows.push((node, row));
    }
    Policy::new(model, rows)
}

/// Random leaf losses in `[0, max_loss]` indexed by state.
pub fn random_losses<R: Rng>(rng: &mut R, model: &EnvironmentModel, max_loss: f64) -> Vec<f64> {
    (0..model.num_states())
        .map(|s| {
            if model.terminal_loss(StateId(s)).is_some() {
                rng.gen_range(0.0..=max_loss)
            } else {
                0.0
            }
        })
        .collect()
}

/// Terminal states below each node of layer `time`, for tree-shaped models.
pub fn leaves_by_ancestor(model: &EnvironmentModel, time: usize) -> Result<BTreeMap<Node, Vec<StateId>>> {
    let mut out = BTreeMap::new();
    for node in model.nodes().filter(|n| n.time == time) {
        let mut frontier = vec![node];
        let mut leaves = Vec::new();
        while let Some(n) = frontier.pop() {
            let mut children: Vec<StateId> = Vec::new();
            for &a in model.actions(n)? {
                for &(s, p) in model.kernel(n, a)? {
                    if p > 0.0 && !children.contains(&s) {
                        children.push(s);
                    }
                }
            }
            for s in children {
                if n.time + 1 == model.horizon() {
                    leaves.push(s);
                } else {
                    frontier.push(Node::new(n.time + 1, s));
                }
            }
        }
        leaves.sort();
        leaves.dedup();
        out.insert(node, leaves);
    }
    Ok(out)
}

pub fn random_risk_spec<R: Rng>(rng: &mut R) -> RiskSpec {
    match rng.gen_range(0..3) {
        0 => RiskSpec::Expectation,
        1 => RiskSpec::Entropic { gamma: rng.gen_range(0.01..0.2) },
        _ => RiskSpec::ConditionalEs { alpha: rng.gen_range(0.5..0.95) },
    }
}

/// A random member of the payment witness family. Some draws satisfy all
/// witness conditions and some do not.
pub fn random_payment_witness<R: Rng>(rng: &mut R) -> Result<WitnessInstance> {
    let n_models = rng.gen_range(1..=3);
    let lost = rng.gen_range(20.0..150.0);
    let p = PaymentParams {
        fraud_rates: (0..n_models).map(|_| rng.gen_range(0.02..0.4)).collect(),
        lost,
        recalled: rng.gen_range(0.0..lost),
        wire_fee: rng.gen_range(0.0..3.0),
        review_cost: rng.gen_range(0.0..3.0),
        hold_cost: rng.gen_range(0.0..10.0),
        card_loss: None,
    };
    let delta = rng.gen_range(1.0..lost + 10.0);
    let eta = rng.gen_range(0.0..delta);
    payment_instance("random_payment", &p, random_risk_spec(rng), delta, eta)
}

/// A pair of loss vectors whose dynamic risks satisfy `rho_s(X) <= rho_s(Y)`
/// at every time-`s` node without `X <= Y` holding pathwise.
///
/// `Y` starts as a noisy copy of `X`; each time-`s` subtree is then shifted
/// by a constant large enough to restore the premise there. Translation
/// invariance makes the shift exact, which requires a tree-shaped model.
pub fn premise_pair<R: Rng>(
    rng: &mut R,
    model: &EnvironmentModel,
    cont: &Policy,
    spec: &RiskSpec,
    s: usize,
    max_loss: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = random_losses(rng, model, max_loss);
    let mut y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if model.terminal_loss(StateId(i)).is_some() {
                (v + rng.gen_range(-0.5 * max_loss..0.5 * max_loss)).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    if s >= model.horizon() {
        for (yi, xi) in y.iter_mut().zip(&x) {
            *yi = yi.max(*xi) + rng.gen_range(0.0..0.1);
        }
        return Ok((x, y));
    }
    let vx = evaluate_policy_risk(model, cont, spec, &x)?;
    let vy = evaluate_policy_risk(model, cont, spec, &y)?;
    for (node, leaves) in leaves_by_ancestor(model, s)? {
        let (Some(a), Some(b)) = (vx.value(node), vy.value(node)) else {
            continue;
        };
        let shift = (a - b).max(0.0) + rng.gen_range(1e-6..0.5);
        for leaf in leaves {
            y[leaf.0] += shift;
        }
    }
    Ok((x, y))
}
