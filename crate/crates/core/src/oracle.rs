//! Brute-force reference evaluators.
//!
//! Everything here walks explicit histories or enumerates explicit objects and
//! shares no evaluation code with the engine modules; only read accessors of
//! [`EnvironmentModel`] and [`Policy`] are used. Slow on purpose.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::mdp::{ActionId, EnvironmentModel, Intervention, Node, Policy};
use crate::risk::RiskSpec;

/// Hard caps on brute-force work; exceeding one is an error, never a truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_paths: usize,
    pub max_policies: usize,
    pub max_partitions: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self { max_paths: 1 << 20, max_policies: 1 << 16, max_partitions: 1 << 16 }
    }
}

impl EnumerationBudget {
    pub fn new(max_paths: usize, max_policies: usize, max_partitions: usize) -> Result<Self> {
        if max_paths == 0 || max_policies == 0 || max_partitions == 0 {
            return Err(Error::InvalidBudget("caps must be at least 1".into()));
        }
        Ok(Self { max_paths, max_policies, max_partitions })
    }
}

/// Children of a history as `(next_state, probability)`, expanding the policy.
fn children(
    model: &EnvironmentModel,
    node: Node,
    forced: Option<ActionId>,
    cont: &Policy,
) -> Result<Vec<(crate::StateId, f64)>> {
    let mut out = Vec::new();
    let actions: Vec<(ActionId, f64)> = match forced {
        Some(a) => vec![(a, 1.0)],
        None => cont
            .row(node)
            .ok_or_else(|| Error::PolicyUndefined {
                time: node.time,
                state: model.state_name(node.state).to_string(),
            })?
            .to_vec(),
    };
    for (a, pa) in actions {
        if pa <= 0.0 {
            continue;
        }
        for &(s, ps) in model.kernel(node, a)? {
            if ps > 0.0 {
                out.push((s, pa * ps));
            }
        }
    }
    Ok(out)
}

/// Exact terminal loss law by enumerating every path of the history tree.
pub fn enumerate_terminal_law(
    model: &EnvironmentModel,
    iv: &Intervention,
    cont: &Policy,
    budget: &EnumerationBudget,
) -> Result<Vec<(f64, f64)>> {
    let mut paths: Vec<(f64, f64)> = Vec::new();
    let mut stack = vec![(iv.node, 1.0, true)];
    while let Some((node, prob, first)) = stack.pop() {
        if node.time == model.horizon() {
            let loss = model
                .terminal_loss(node.state)
                .ok_or_else(|| Error::MissingTerminalLoss(model.state_name(node.state).to_string()))?;
            paths.push((loss, prob));
            if paths.len() > budget.max_paths {
                return Err(Error::BudgetExceeded { what: "paths", limit: budget.max_paths });
            }
            continue;
        }
        let forced = first.then_some(iv.action);
        for (s, p) in children(model, node, forced, cont)? {
            stack.push((Node::new(node.time + 1, s), prob * p, false));
        }
    }
    paths.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut law: Vec<(f64, f64)> = Vec::new();
    for (x, p) in paths {
        if let Some(last) = law.last_mut() {
            if last.0 == x {
                last.1 += p;
                continue;
            }
        }
        law.push((x, p));
    }
    Ok(law)
}

/// Direct evaluation of a risk functional on a full distribution.
///
/// The entropic case uses the plain formula unless `gamma * max(y)` exceeds
/// 700; expected shortfall integrates the quantile function over `[alpha, 1]`.
pub fn static_risk(dist: &[(f64, f64)], spec: &RiskSpec) -> f64 {
    match *spec {
        RiskSpec::Expectation => dist.iter().map(|(y, p)| y * p).sum(),
        RiskSpec::Entropic { gamma } => {
            let top = dist.iter().map(|(y, _)| *y).fold(f64::NEG_INFINITY, f64::max);
            if gamma * top > 700.0 {
                let s: f64 = dist.iter().map(|(y, p)| p * (gamma * (y - top)).exp()).sum();
                top + s.ln() / gamma
            } else {
                dist.iter().map(|(y, p)| p * (gamma * y).exp()).sum::<f64>().ln() / gamma
            }
        }
        RiskSpec::ConditionalEs { alpha } => {
            let mut sorted = dist.to_vec();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total: f64 = sorted.iter().map(|(_, p)| p).sum();
            let mut lo = 0.0;
            let mut integral = 0.0;
            for (y, p) in sorted {
                let hi = lo + p / total;
                let overlap = (hi.min(1.0) - lo.max(alpha)).max(0.0);
                integral += y * overlap;
                lo = hi;
            }
            integral / (1.0 - alpha)
        }
    }
}

/// The recursive definition evaluated on the explicit history tree, with
/// [`static_risk`] as the one-step mapping at every history.
pub fn recursive_risk_by_paths(
    model: &EnvironmentModel,
    iv: &Intervention,
    cont: &Policy,
    spec: &RiskSpec,
    losses: &[f64],
    budget: &EnumerationBudget,
) -> Result<f64> {
    let mut visited = 0usize;
    recurse(model, iv.node, Some(iv.action), cont, spec, losses, budget, &mut visited)
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    model: &EnvironmentModel,
    node: Node,
    forced: Option<ActionId>,
    cont: &Policy,
    spec: &RiskSpec,
    losses: &[f64],
    budget: &EnumerationBudget,
    visited: &mut usize,
) -> Result<f64> {
    *visited += 1;
    if *visited > budget.max_paths {
        return Err(Error::BudgetExceeded { what: "histories", limit: budget.max_paths });
    }
    if node.time == model.horizon() {
        return Ok(losses[node.state.0]);
    }
    let mut dist = Vec::new();
    for (s, p) in children(model, node, forced, cont)? {
        let v = recurse(model, Node::new(node.time + 1, s), None, cont, spec, losses, budget, visited)?;
        dist.push((v, p));
    }
    Ok(static_risk(&dist, spec))
}

/// Decision nodes reachable from `from` (inclusive) under any actions.
pub fn subtree_nodes(model: &EnvironmentModel, from: Node) -> Result<Vec<Node>> {
    let mut seen = BTreeSet::new();
    let mut frontier = vec![from];
    while let Some(n) = frontier.pop() {
        if n.time >= model.horizon() || !seen.insert(n) {
            continue;
        }
        for &a in model.actions(n)? {
            for &(s, p) in model.kernel(n, a)? {
                if p > 0.0 {
                    frontier.push(Node::new(n.time + 1, s));
                }
            }
        }
    }
    Ok(seen.into_iter().collect())
}

/// Decision nodes reachable after forcing `action` at `node` (excluding `node`).
pub fn nodes_after(model: &EnvironmentModel, node: Node, action: ActionId) -> Result<Vec<Node>> {
    let mut all = BTreeSet::new();
    for &(s, p) in model.kernel(node, action)? {
        if p > 0.0 && node.time + 1 < model.horizon() {
            all.extend(subtree_nodes(model, Node::new(node.time + 1, s))?);
        }
    }
    Ok(all.into_iter().collect())
}

/// A deterministic Markov policy restricted to a node set.
pub type DeterministicChoice = Vec<(Node, ActionId)>;

/// All deterministic Markov policies on the subtree rooted at `from`.
pub fn enumerate_policies(
    model: &EnvironmentModel,
    from: Node,
    budget: &EnumerationBudget,
) -> Result<Vec<DeterministicChoice>> {
    let nodes = subtree_nodes(model, from)?;
    enumerate_policies_over(model, &nodes, budget)
}

/// All deterministic choices on an explicit node set, in mixed-radix order.
pub fn enumerate_policies_over(
    model: &EnvironmentModel,
    nodes: &[Node],
    budget: &EnumerationBudget,
) -> Result<Vec<DeterministicChoice>> {
    let sets: Vec<&[ActionId]> = nodes.iter().map(|&n| model.actions(n)).collect::<Result<_>>()?;
    let mut count: usize = 1;
    for s in &sets {
        count = count.saturating_mul(s.len());
        if count > budget.max_policies {
            return Err(Error::BudgetExceeded { what: "policies", limit: budget.max_policies });
        }
    }
    let mut out = Vec::with_capacity(count);
    let mut digits = vec![0usize; nodes.len()];
    for _ in 0..count {
        out.push(nodes.iter().zip(&digits).zip(&sets).map(|((n, &d), s)| (*n, s[d])).collect());
        for (d, s) in digits.iter_mut().zip(&sets) {
            *d += 1;
            if *d < s.len() {
                break;
            }
            *d = 0;
        }
    }
    Ok(out)
}

/// Ordered compositions of `total` into at most `max_parts` positive parts.
pub fn compositions(total: usize, max_parts: usize, budget: &EnumerationBudget) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    compose(total, max_parts, &mut current, &mut out, budget)?;
    Ok(out)
}

fn compose(
    rest: usize,
    parts_left: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
    budget: &EnumerationBudget,
) -> Result<()> {
    if rest == 0 {
        if !current.is_empty() {
            out.push(current.clone());
            if out.len() > budget.max_partitions {
                return Err(Error::BudgetExceeded { what: "partitions", limit: budget.max_partitions });
            }
        }
        return Ok(());
    }
    if parts_left == 0 {
        return Ok(());
    }
    for first in 1..=rest {
        current.push(first);
        compose(rest - first, parts_left - 1, current, out, budget)?;
        current.pop();
    }
    Ok(())
}
