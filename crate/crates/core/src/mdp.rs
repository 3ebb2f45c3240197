//! Finite-horizon tabular environments with interventional semantics.
//!
//! A model is a layered graph of `(time, state)` nodes. Every node carries an
//! ordered action set, and every action an ordered transition kernel over the
//! states of the next layer. States at the horizon carry a terminal loss.
//! Forcing an action at a node and following a fixed continuation policy
//! afterwards yields the interventional terminal loss law.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for kernel and policy rows summing to one.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Total-variation threshold above which an action counts as side-effect-bearing.
pub const SIDE_EFFECT_TOL: f64 = 1e-12;
/// Coupled cells shorter than this are treated as floating-point slivers.
const CELL_EPS: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionId(pub usize);

/// A history, identified with its `(time, state)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Node {
    pub time: usize,
    pub state: StateId,
}

impl Node {
    pub fn new(time: usize, state: StateId) -> Self {
        Self { time, state }
    }
}

// ---------------------------------------------------------------------------
// Serializable description
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub name: String,
    /// Contractually designated external component (ledger, database, ...).
    #[serde(default)]
    pub external: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub id: String,
    #[serde(default)]
    pub values: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub action: String,
    /// Ordered kernel row as `[next_state, probability]` pairs.
    pub next: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub time: usize,
    pub state: String,
    pub actions: Vec<ActionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeDefaultEntry {
    pub action: String,
    pub default: String,
    /// Restricts the entry to one time step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<usize>,
    /// Restricts the entry to one state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
}

fn default_noop() -> String {
    "noop".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub horizon: usize,
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
    pub states: Vec<StateSpec>,
    pub initial_state: String,
    #[serde(default = "default_noop")]
    pub noop: String,
    pub nodes: Vec<NodeSpec>,
    pub terminal_loss: BTreeMap<String, f64>,
    #[serde(default)]
    pub safe_defaults: Vec<SafeDefaultEntry>,
    /// Action category used by approvers and features; defaults to the action id.
    #[serde(default)]
    pub categories: BTreeMap<String, String>,
}

// ---------------------------------------------------------------------------
// Built model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct NodeData {
    actions: Vec<ActionId>,
    kernels: Vec<Vec<(StateId, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentModel {
    horizon: usize,
    components: Vec<ComponentSpec>,
    state_names: Vec<String>,
    state_values: Vec<Vec<i64>>,
    state_index: HashMap<String, StateId>,
    action_names: Vec<String>,
    action_index: HashMap<String, ActionId>,
    categories: Vec<String>,
    noop: ActionId,
    initial: StateId,
    nodes: BTreeMap<Node, NodeData>,
    terminal_loss: Vec<Option<f64>>,
    safe_defaults: SafeDefaultMap,
}

/// Validates a model description and builds the immutable model.
pub fn build_model(spec: &ModelSpec) -> Result<EnvironmentModel> {
    if spec.horizon == 0 {
        return Err(Error::ZeroHorizon);
    }
    let arity = spec.components.len();
    let mut state_names = Vec::with_capacity(spec.states.len());
    let mut state_values = Vec::with_capacity(spec.states.len());
    let mut state_index = HashMap::new();
    for s in &spec.states {
        if s.values.len() != arity {
            return Err(Error::ComponentArity {
                state: s.id.clone(),
                expected: arity,
                got: s.values.len(),
            });
        }
        if state_index.insert(s.id.clone(), StateId(state_names.len())).is_some() {
            return Err(Error::DuplicateState(s.id.clone()));
        }
        state_names.push(s.id.clone());
        state_values.push(s.values.clone());
    }
    let lookup_state = |name: &str| -> Result<StateId> {
        state_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownState(name.to_string()))
    };

    // Actions are registered in order of first appearance, no-op first.
    let mut action_names = vec![spec.noop.clone()];
    let mut action_index = HashMap::from([(spec.noop.clone(), ActionId(0))]);
    for n in &spec.nodes {
        for a in &n.actions {
            if !action_index.contains_key(&a.action) {
                action_index.insert(a.action.clone(), ActionId(action_names.len()));
                action_names.push(a.action.clone());
            }
        }
    }
    for s in &spec.safe_defaults {
        for name in [&s.action, &s.default] {
            if !action_index.contains_key(name) {
                return Err(Error::UnknownAction(name.clone()));
            }
        }
    }

    let mut terminal_loss = vec![None; state_names.len()];
    for (name, &loss) in &spec.terminal_loss {
        let id = lookup_state(name)?;
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::InvalidLoss { state: name.clone(), loss });
        }
        terminal_loss[id.0] = Some(loss);
    }

    let mut nodes = BTreeMap::new();
    for n in &spec.nodes {
        let state = lookup_state(&n.state)?;
        if n.time >= spec.horizon {
            return Err(Error::NodeBeyondHorizon { time: n.time, state: n.state.clone() });
        }
        if n.actions.is_empty() {
            return Err(Error::EmptyActionSet { time: n.time, state: n.state.clone() });
        }
        let mut actions = Vec::with_capacity(n.actions.len());
        let mut kernels = Vec::with_capacity(n.actions.len());
        for a in &n.actions {
            let id = action_index[&a.action];
            if actions.contains(&id) {
                return Err(Error::DuplicateAction {
                    time: n.time,
                    state: n.state.clone(),
                    action: a.action.clone(),
                });
            }
            let mut row = Vec::with_capacity(a.next.len());
            let mut sum = 0.0;
            for (target, p) in &a.next {
                if !p.is_finite() || *p < 0.0 {
                    return Err(Error::InvalidProbability {
                        time: n.time,
                        state: n.state.clone(),
                        action: a.action.clone(),
                        prob: *p,
                    });
                }
                sum += p;
                row.push((lookup_state(target)?, *p));
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::KernelRowSum {
                    time: n.time,
                    state: n.state.clone(),
                    action: a.action.clone(),
                    sum,
                });
            }
            actions.push(id);
            kernels.push(row);
        }
        if !actions.contains(&ActionId(0)) {
            return Err(Error::MissingNoop {
                time: n.time,
                state: n.state.clone(),
                noop: spec.noop.clone(),
            });
        }
        if nodes
            .insert(Node::new(n.time, state), NodeData { actions, kernels })
            .is_some()
        {
            return Err(Error::DuplicateNode { time: n.time, state: n.state.clone() });
        }
    }

    let initial = lookup_state(&spec.initial_state)?;
    if !nodes.contains_key(&Node::new(0, initial)) {
        return Err(Error::MissingRoot(spec.initial_state.clone()));
    }

    // Every kernel target must be a node of the next layer or a terminal state.
    for (node, data) in &nodes {
        let next_time = node.time + 1;
        for (a, row) in data.actions.iter().zip(&data.kernels) {
            for (target, p) in row {
                if *p == 0.0 {
                    continue;
                }
                if next_time == spec.horizon {
                    if terminal_loss[target.0].is_none() {
                        return Err(Error::MissingTerminalLoss(state_names[target.0].clone()));
                    }
                } else if !nodes.contains_key(&Node::new(next_time, *target)) {
                    return Err(Error::DanglingTarget {
                        time: node.time,
                        state: state_names[node.state.0].clone(),
                        action: action_names[a.0].clone(),
                        target: state_names[target.0].clone(),
                        next_time,
                    });
                }
            }
        }
    }

    let categories = action_names
        .iter()
        .map(|a| spec.categories.get(a).cloned().unwrap_or_else(|| a.clone()))
        .collect();

    let mut model = EnvironmentModel {
        horizon: spec.horizon,
        components: spec.components.clone(),
        state_names,
        state_values,
        state_index,
        action_names,
        action_index,
        categories,
        noop: ActionId(0),
        initial,
        nodes,
        terminal_loss,
        safe_defaults: SafeDefaultMap::default(),
    };
    model.safe_defaults = SafeDefaultMap::new(&model, &spec.safe_defaults)?;
    Ok(model)
}

impl EnvironmentModel {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn root(&self) -> Node {
        Node::new(0, self.initial)
    }

    pub fn noop(&self) -> ActionId {
        self.noop
    }

    pub fn components(&self) -> &[ComponentSpec] {
        &self.components
    }

    pub fn num_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn num_actions(&self) -> usize {
        self.action_names.len()
    }

    pub fn state_name(&self, s: StateId) -> &str {
        &self.state_names[s.0]
    }

    pub fn state_values(&self, s: StateId) -> &[i64] {
        &self.state_values[s.0]
    }

    pub fn state_id(&self, name: &str) -> Result<StateId> {
        self.state_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownState(name.to_string()))
    }

    pub fn action_name(&self, a: ActionId) -> &str {
        &self.action_names[a.0]
    }

    pub fn action_id(&self, name: &str) -> Result<ActionId> {
        self.action_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownAction(name.to_string()))
    }

    pub fn category(&self, a: ActionId) -> &str {
        &self.categories[a.0]
    }

    /// Resolves a `(time, state name)` pair to an existing node.
    pub fn node(&self, time: usize, state: &str) -> Result<Node> {
        let node = Node::new(time, self.state_id(state)?);
        if self.nodes.contains_key(&node) {
            Ok(node)
        } else {
            Err(Error::UnknownNode { time, state: state.to_string() })
        }
    }

    pub fn has_node(&self, node: Node) -> bool {
        self.nodes.contains_key(&node)
    }

    /// All decision nodes in `(time, state)` order.
    pub fn nodes(&self) -> impl Iterator<Item = Node> + '_ {
        self.nodes.keys().copied()
    }

    pub fn terminal_loss(&self, s: StateId) -> Option<f64> {
        self.terminal_loss[s.0]
    }

    /// Terminal losses indexed by state; states without a loss read as zero.
    pub fn loss_vector(&self) -> Vec<f64> {
        self.terminal_loss.iter().map(|l| l.unwrap_or(0.0)).collect()
    }

    pub fn max_loss(&self) -> f64 {
        self.terminal_loss.iter().flatten().fold(0.0, |m, &l| m.max(l))
    }

    pub fn safe_defaults(&self) -> &SafeDefaultMap {
        &self.safe_defaults
    }

    pub fn actions(&self, node: Node) -> Result<&[ActionId]> {
        Ok(&self.node_data(node)?.actions)
    }

    pub fn is_available(&self, node: Node, action: ActionId) -> bool {
        self.nodes
            .get(&node)
            .is_some_and(|d| d.actions.contains(&action))
    }

    /// Ordered kernel row of `action` at `node`.
    pub fn kernel(&self, node: Node, action: ActionId) -> Result<&[(StateId, f64)]> {
        let data = self.node_data(node)?;
        let idx = data
            .actions
            .iter()
            .position(|a| *a == action)
            .ok_or_else(|| self.unavailable(node, action))?;
        Ok(&data.kernels[idx])
    }

    fn node_data(&self, node: Node) -> Result<&NodeData> {
        self.nodes.get(&node).ok_or_else(|| Error::UnknownNode {
            time: node.time,
            state: self.state_names[node.state.0].clone(),
        })
    }

    pub(crate) fn unavailable(&self, node: Node, action: ActionId) -> Error {
        Error::ActionUnavailable {
            time: node.time,
            state: self.state_names[node.state.0].clone(),
            action: self.action_names[action.0].clone(),
        }
    }

    pub(crate) fn policy_undefined(&self, node: Node) -> Error {
        Error::PolicyUndefined {
            time: node.time,
            state: self.state_names[node.state.0].clone(),
        }
    }

    /// Whether two models have the same states, nodes and action sets.
    pub fn same_skeleton(&self, other: &Self) -> bool {
        self.horizon == other.horizon
            && self.state_names == other.state_names
            && self.action_names == other.action_names
            && self.nodes.len() == other.nodes.len()
            && self
                .nodes
                .iter()
                .zip(&other.nodes)
                .all(|((n1, d1), (n2, d2))| n1 == n2 && d1.actions == d2.actions)
    }
}

// ---------------------------------------------------------------------------
// Safe defaults
// ---------------------------------------------------------------------------

/// Contract-time mapping from an intended action to its least committing substitute.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SafeDefaultMap {
    global: BTreeMap<ActionId, ActionId>,
    by_time: BTreeMap<(usize, ActionId), ActionId>,
    by_state: BTreeMap<(StateId, ActionId), ActionId>,
    by_node: BTreeMap<(Node, ActionId), ActionId>,
    images: BTreeSet<ActionId>,
}

impl SafeDefaultMap {
    /// Builds and validates a map against `model`. More specific entries win.
    pub fn new(model: &EnvironmentModel, entries: &[SafeDefaultEntry]) -> Result<Self> {
        let mut map = Self::default();
        for e in entries {
            let action = model.action_id(&e.action)?;
            let default = model.action_id(&e.default)?;
            let state = e.state.as_deref().map(|s| model.state_id(s)).transpose()?;
            match (e.time, state) {
                (Some(t), Some(s)) => {
                    let node = Node::new(t, s);
                    if !model.has_node(node) {
                        return Err(Error::UnknownNode {
                            time: t,
                            state: model.state_name(s).to_string(),
                        });
                    }
                    map.by_node.insert((node, action), default)
                }
                (Some(t), None) => map.by_time.insert((t, action), default),
                (None, Some(s)) => map.by_state.insert((s, action), default),
                (None, None) => map.global.insert(action, default),
            };
            map.images.insert(default);
        }
        // Idempotence: an image must map to itself wherever it is listed.
        let pairs: Vec<(ActionId, ActionId)> = map
            .by_node
            .iter()
            .map(|((_, a), d)| (*a, *d))
            .chain(map.by_time.iter().map(|((_, a), d)| (*a, *d)))
            .chain(map.by_state.iter().map(|((_, a), d)| (*a, *d)))
            .chain(map.global.iter().map(|(a, d)| (*a, *d)))
            .collect();
        for (a, d) in pairs {
            if map.images.contains(&a) && a != d {
                return Err(Error::SafeDefaultNotIdempotent {
                    default: model.action_name(a).to_string(),
                    image: model.action_name(d).to_string(),
                });
            }
        }
        // Wherever the intended action is available, so must be its default.
        for node in model.nodes() {
            for &a in model.actions(node)? {
                if let Some(d) = map.lookup(node, a) {
                    if !model.is_available(node, d) {
                        return Err(Error::SafeDefaultUnavailable {
                            time: node.time,
                            state: model.state_name(node.state).to_string(),
                            action: model.action_name(a).to_string(),
                            default: model.action_name(d).to_string(),
                        });
                    }
                }
            }
        }
        Ok(map)
    }

    fn lookup(&self, node: Node, action: ActionId) -> Option<ActionId> {
        self.by_node
            .get(&(node, action))
            .or_else(|| self.by_state.get(&(node.state, action)))
            .or_else(|| self.by_time.get(&(node.time, action)))
            .or_else(|| self.global.get(&action))
            .copied()
    }

    /// The safe default of `action` at `node`.
    ///
    /// Unlisted actions resolve to themselves when they are the no-op, the
    /// image of some entry, or not side-effect-bearing; otherwise the map is
    /// incomplete for a priced action.
    pub fn resolve(&self, model: &EnvironmentModel, node: Node, action: ActionId) -> Result<ActionId> {
        if !model.is_available(node, action) {
            return Err(model.unavailable(node, action));
        }
        if let Some(d) = self.lookup(node, action) {
            return Ok(d);
        }
        if action == model.noop()
            || self.images.contains(&action)
            || !is_side_effect_bearing(model, node, action)?
        {
            return Ok(action);
        }
        Err(Error::MissingSafeDefault {
            time: node.time,
            state: model.state_name(node.state).to_string(),
            action: model.action_name(action).to_string(),
        })
    }

    /// Fails if any side-effect-bearing action lacks a safe default.
    pub fn check_complete(&self, model: &EnvironmentModel) -> Result<()> {
        for node in model.nodes() {
            for &a in model.actions(node)? {
                self.resolve(model, node, a)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Policies and interventions
// ---------------------------------------------------------------------------

/// Randomized Markov policy: a probability row over available actions per node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Policy {
    rows: BTreeMap<Node, Vec<(ActionId, f64)>>,
}

impl Policy {
    pub fn new(
        model: &EnvironmentModel,
        rows: impl IntoIterator<Item = (Node, Vec<(ActionId, f64)>)>,
    ) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (node, row) in rows {
            validate_row(model, node, &row)?;
            out.insert(node, row);
        }
        Ok(Self { rows: out })
    }

    /// Deterministic policy chosen by `pick` at every node of the model.
    pub fn deterministic(
        model: &EnvironmentModel,
        mut pick: impl FnMut(Node, &[ActionId]) -> ActionId,
    ) -> Result<Self> {
        let rows: Vec<_> = model
            .nodes()
            .map(|n| {
                let a = pick(n, model.actions(n).expect("node exists"));
                (n, vec![(a, 1.0)])
            })
            .collect();
        Self::new(model, rows)
    }

    /// Plays the no-op everywhere.
    pub fn noop(model: &EnvironmentModel) -> Self {
        let noop = model.noop();
        Self::deterministic(model, |_, _| noop).expect("no-op is always available")
    }

    pub fn from_spec(model: &EnvironmentModel, spec: &PolicySpec) -> Result<Self> {
        let mut rows = BTreeMap::new();
        for r in &spec.rows {
            let node = model.node(r.time, &r.state)?;
            let row = r
                .probs
                .iter()
                .map(|(a, p)| Ok((model.action_id(a)?, *p)))
                .collect::<Result<Vec<_>>>()?;
            rows.insert(node, row);
        }
        let fallback = spec
            .fallback
            .iter()
            .map(|a| model.action_id(a))
            .collect::<Result<Vec<_>>>()?;
        for node in model.nodes() {
            rows.entry(node).or_insert_with(|| {
                let a = fallback
                    .iter()
                    .copied()
                    .find(|a| model.is_available(node, *a))
                    .unwrap_or(model.noop());
                vec![(a, 1.0)]
            });
        }
        Self::new(model, rows)
    }

    pub fn row(&self, node: Node) -> Option<&[(ActionId, f64)]> {
        self.rows.get(&node).map(Vec::as_slice)
    }

    /// Replaces the rows at the given nodes with deterministic choices.
    pub fn with_overrides(&self, choices: &[(Node, ActionId)]) -> Self {
        let mut rows = self.rows.clone();
        for &(n, a) in choices {
            rows.insert(n, vec![(a, 1.0)]);
        }
        Self { rows }
    }

    pub fn rows(&self) -> impl Iterator<Item = (Node, &[(ActionId, f64)])> {
        self.rows.iter().map(|(n, r)| (*n, r.as_slice()))
    }
}

fn validate_row(model: &EnvironmentModel, node: Node, row: &[(ActionId, f64)]) -> Result<()> {
    let bad = |reason: String| Error::InvalidPolicyRow {
        time: node.time,
        state: model.state_name(node.state).to_string(),
        reason,
    };
    if !model.has_node(node) {
        return Err(Error::UnknownNode {
            time: node.time,
            state: model.state_name(node.state).to_string(),
        });
    }
    let mut sum = 0.0;
    for &(a, p) in row {
        if !model.is_available(node, a) {
            return Err(bad(format!("action '{}' unavailable", model.action_name(a))));
        }
        if !p.is_finite() || p < 0.0 {
            return Err(bad(format!("invalid probability {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(bad(format!("row sums to {sum}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRowSpec {
    pub time: usize,
    pub state: String,
    pub probs: Vec<(String, f64)>,
}

/// Explicit rows plus an ordered fallback preference for unlisted nodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    #[serde(default)]
    pub rows: Vec<PolicyRowSpec>,
    #[serde(default)]
    pub fallback: Vec<String>,
}

/// `do(action)` at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Intervention {
    pub node: Node,
    pub action: ActionId,
}

impl Intervention {
    pub fn new(model: &EnvironmentModel, node: Node, action: ActionId) -> Result<Self> {
        if !model.has_node(node) {
            return Err(Error::UnknownNode {
                time: node.time,
                state: model.state_name(node.state).to_string(),
            });
        }
        if !model.is_available(node, action) {
            return Err(model.unavailable(node, action));
        }
        Ok(Self { node, action })
    }
}

// ---------------------------------------------------------------------------
// Interventional laws
// ---------------------------------------------------------------------------

/// Finite distribution over loss values, sorted by value with merged atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDistribution {
    atoms: Vec<(f64, f64)>,
}

impl LossDistribution {
    /// Builds from `(value, probability)` pairs, dropping zero-mass atoms.
    pub fn from_atoms(atoms: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut v: Vec<(f64, f64)> = atoms.into_iter().filter(|(_, p)| *p > 0.0).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(v.len());
        for (x, p) in v {
            match merged.last_mut() {
                Some(last) if last.0 == x => last.1 += p,
                _ => merged.push((x, p)),
            }
        }
        Self { atoms: merged }
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|(_, p)| p).sum()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(x, p)| x * p).sum()
    }

    pub fn prob_of(&self, value: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|(x, _)| *x == value)
            .map(|(_, p)| p)
            .sum()
    }
}

/// Outcome row at a node when `action` is forced (or the policy row otherwise).
pub(crate) fn outcome_row(
    model: &EnvironmentModel,
    node: Node,
    forced: Option<ActionId>,
    cont: &Policy,
) -> Result<Vec<(StateId, f64)>> {
    match forced {
        Some(a) => Ok(model.kernel(node, a)?.to_vec()),
        None => {
            let row = cont.row(node).ok_or_else(|| model.policy_undefined(node))?;
            let mut out = Vec::new();
            for &(a, pa) in row {
                if pa == 0.0 {
                    continue;
                }
                for &(s, ps) in model.kernel(node, a)? {
                    out.push((s, pa * ps));
                }
            }
            Ok(out)
        }
    }
}

/// Probability of each terminal state under `do(iv.action)` then `cont`.
pub fn terminal_state_law(
    model: &EnvironmentModel,
    iv: &Intervention,
    cont: &Policy,
) -> Result<BTreeMap<StateId, f64>> {
    let mut layer = BTreeMap::from([(iv.node.state, 1.0)]);
    for time in iv.node.time..model.horizon() {
        let mut next: BTreeMap<StateId, f64> = BTreeMap::new();
        for (&s, &mass) in &layer {
            let node = Node::new(time, s);
            let forced = (time == iv.node.time).then_some(iv.action);
            for (t, p) in outcome_row(model, node, forced, cont)? {
                if p > 0.0 {
                    *next.entry(t).or_default() += mass * p;
                }
            }
        }
        layer = next;
    }
    Ok(layer)
}

/// Exact law of the interventional terminal loss `L^{do(a), cont}`.
pub fn terminal_loss_distribution(
    model: &EnvironmentModel,
    iv: &Intervention,
    cont: &Policy,
) -> Result<LossDistribution> {
    let law = terminal_state_law(model, iv, cont)?;
    let mut atoms = Vec::with_capacity(law.len());
    for (s, p) in law {
        let loss = model
            .terminal_loss(s)
            .ok_or_else(|| Error::MissingTerminalLoss(model.state_name(s).to_string()))?;
        atoms.push((loss, p));
    }
    Ok(LossDistribution::from_atoms(atoms))
}

/// Samples the terminal state of `do(iv.action)` then `cont` with uniforms from `draw`.
pub fn sample_terminal(
    model: &EnvironmentModel,
    iv: &Intervention,
    cont: &Policy,
    mut draw: impl FnMut() -> f64,
) -> Result<StateId> {
    let mut state = iv.node.state;
    for time in iv.node.time..model.horizon() {
        let node = Node::new(time, state);
        let action = if time == iv.node.time {
            iv.action
        } else {
            let row = cont.row(node).ok_or_else(|| model.policy_undefined(node))?;
            pick_index(row.iter().map(|(_, p)| *p), draw()).map_or(model.noop(), |i| row[i].0)
        };
        let kernel = model.kernel(node, action)?;
        let i = pick_index(kernel.iter().map(|(_, p)| *p), draw()).unwrap_or(kernel.len() - 1);
        state = kernel[i].0;
    }
    Ok(state)
}

/// Inverse-CDF selection over an ordered probability row.
pub fn pick_index(probs: impl Iterator<Item = f64>, u: f64) -> Option<usize> {
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, p) in probs.enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last_positive = Some(i);
        if u < acc {
            return Some(i);
        }
    }
    last_positive
}

// ---------------------------------------------------------------------------
// Side effects
// ---------------------------------------------------------------------------

/// Total-variation distance between the external-component marginals of the
/// next-state kernels of `action` and the no-op at `node`.
pub fn external_tv_distance(model: &EnvironmentModel, node: Node, action: ActionId) -> Result<f64> {
    let external: Vec<usize> = model
        .components()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.external)
        .map(|(i, _)| i)
        .collect();
    let marginal = |a: ActionId| -> Result<BTreeMap<Vec<i64>, f64>> {
        let mut m = BTreeMap::new();
        for &(s, p) in model.kernel(node, a)? {
            let key: Vec<i64> = external.iter().map(|&i| model.state_values(s)[i]).collect();
            *m.entry(key).or_insert(0.0) += p;
        }
        Ok(m)
    };
    let ma = marginal(action)?;
    let m0 = marginal(model.noop())?;
    let keys: BTreeSet<&Vec<i64>> = ma.keys().chain(m0.keys()).collect();
    Ok(0.5
        * keys
            .into_iter()
            .map(|k| (ma.get(k).unwrap_or(&0.0) - m0.get(k).unwrap_or(&0.0)).abs())
            .sum::<f64>())
}

/// Whether `action` moves contractually designated external state differently
/// from the no-op at `node`.
pub fn is_side_effect_bearing(model: &EnvironmentModel, node: Node, action: ActionId) -> Result<bool> {
    Ok(external_tv_distance(model, node, action)? > SIDE_EFFECT_TOL)
}

// ---------------------------------------------------------------------------
// Coupled rollouts
// ---------------------------------------------------------------------------

/// One branch of a coupled rollout: an intervention at a shared node and the
/// continuation policy followed afterwards.
#[derive(Debug, Clone, Copy)]
pub struct Branch<'a> {
    pub action: ActionId,
    pub cont: &'a Policy,
}

/// A cell of the common-random-numbers coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledOutcome {
    pub prob: f64,
    /// Terminal state reached by each branch, in branch order.
    pub terminals: Vec<StateId>,
}

/// Enumerates the joint outcomes of several branches started at `node` when
/// every step of every branch is driven by the same uniform draw through the
/// inverse CDF of its ordered outcome row.
///
/// Each branch keeps its exact marginal law; pathwise comparisons between
/// branches are made cell by cell.
pub fn coupled_outcomes(
    model: &EnvironmentModel,
    node: Node,
    branches: &[Branch<'_>],
) -> Result<Vec<CoupledOutcome>> {
    let mut out = Vec::new();
    let start = vec![node.state; branches.len()];
    coupled_walk(model, node.time, true, &start, 1.0, branches, &mut out)?;
    Ok(out)
}

fn coupled_walk(
    model: &EnvironmentModel,
    time: usize,
    first: bool,
    states: &[StateId],
    mass: f64,
    branches: &[Branch<'_>],
    out: &mut Vec<CoupledOutcome>,
) -> Result<()> {
    if time == model.horizon() {
        out.push(CoupledOutcome { prob: mass, terminals: states.to_vec() });
        return Ok(());
    }
    let rows = branches
        .iter()
        .zip(states)
        .map(|(b, &s)| {
            let forced = first.then_some(b.action);
            let row: Vec<_> = outcome_row(model, Node::new(time, s), forced, b.cont)?
                .into_iter()
                .filter(|(_, p)| *p > 0.0)
                .collect();
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let cumulative: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            r.iter()
                .scan(0.0, |acc, (_, p)| {
                    *acc += p;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    let mut cuts: Vec<f64> = cumulative.iter().flatten().copied().collect();
    cuts.push(0.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1].min(1.0));
        if hi - lo < CELL_EPS {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let next: Vec<StateId> = rows
            .iter()
            .zip(&cumulative)
            .map(|(r, c)| {
                let i = c.iter().position(|&x| mid < x).unwrap_or(r.len() - 1);
                r[i].0
            })
            .collect();
        coupled_walk(model, time + 1, false, &next, mass * (hi - lo), branches, out)?;
    }
    Ok(())
}
