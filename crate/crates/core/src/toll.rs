//! Counterfactual tolls, robust authority premia and robust capital.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    coupled_outcomes, ActionId, Branch, EnvironmentModel, Intervention, Node, Policy,
    SafeDefaultMap, StateId,
};
use crate::oracle::{enumerate_policies_over, nodes_after, EnumerationBudget};
use crate::risk::{evaluate_dynamic_risk, evaluate_dynamic_risk_with_losses, RiskSpec};

/// Pathwise comparisons tolerate this much floating-point noise.
pub const PATH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TollSource {
    Exact,
    Envelope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TollQuote {
    pub signed_toll: f64,
    pub positive_toll: f64,
    pub action: ActionId,
    pub safe_default_used: ActionId,
    pub risk_spec: RiskSpec,
    pub source: TollSource,
}

/// Root risk at `node` of forcing `action` and continuing with `cont`.
pub fn interventional_risk(
    model: &EnvironmentModel,
    node: Node,
    action: ActionId,
    cont: &Policy,
    spec: &RiskSpec,
) -> Result<f64> {
    let iv = Intervention::new(model, node, action)?;
    Ok(evaluate_dynamic_risk(model, &iv, cont, spec)?.root_value())
}

/// Risk of `action` minus risk of its safe default, both under `cont`.
/// Risk-reducing actions get a zero positive part; they are not subsidised.
pub fn counterfactual_toll(
    model: &EnvironmentModel,
    node: Node,
    action: ActionId,
    cont: &Policy,
    spec: &RiskSpec,
    sdm: &SafeDefaultMap,
) -> Result<TollQuote> {
    let default = sdm.resolve(model, node, action)?;
    let signed_toll = if default == action {
        0.0
    } else {
        interventional_risk(model, node, action, cont, spec)?
            - interventional_risk(model, node, default, cont, spec)?
    };
    Ok(TollQuote {
        signed_toll,
        positive_toll: signed_toll.max(0.0),
        action,
        safe_default_used: default,
        risk_spec: *spec,
        source: TollSource::Exact,
    })
}

// ---------------------------------------------------------------------------
// Ambiguity sets
// ---------------------------------------------------------------------------

/// Finite family of admissible models sharing one state/action skeleton.
#[derive(Debug, Clone)]
pub struct AmbiguitySet {
    models: Vec<EnvironmentModel>,
}

impl AmbiguitySet {
    pub fn new(models: Vec<EnvironmentModel>) -> Result<Self> {
        let first = models.first().ok_or(Error::EmptyAmbiguitySet)?;
        for (i, m) in models.iter().enumerate().skip(1) {
            if !first.same_skeleton(m) {
                return Err(Error::SkeletonMismatch(format!("model {i} differs from model 0")));
            }
        }
        Ok(Self { models })
    }

    pub fn models(&self) -> &[EnvironmentModel] {
        &self.models
    }

    pub fn reference(&self) -> &EnvironmentModel {
        &self.models[0]
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Largest clamped risk gap between `a_plus` and its safe default over the set.
pub fn authority_premium(
    amb: &AmbiguitySet,
    node: Node,
    a_plus: ActionId,
    cont: &Policy,
    spec: &RiskSpec,
    sdm: &SafeDefaultMap,
) -> Result<f64> {
    Ok(premium_gaps(amb, node, a_plus, cont, spec, sdm)?
        .into_iter()
        .map(|g| g.max(0.0))
        .fold(0.0, f64::max))
}

/// Unclamped per-model gaps `rho^M(a+) - rho^M(a0)`, in model order.
pub fn premium_gaps(
    amb: &AmbiguitySet,
    node: Node,
    a_plus: ActionId,
    cont: &Policy,
    spec: &RiskSpec,
    sdm: &SafeDefaultMap,
) -> Result<Vec<f64>> {
    amb.models()
        .iter()
        .map(|m| Ok(counterfactual_toll(m, node, a_plus, cont, spec, sdm)?.signed_toll))
        .collect()
}

/// Worst-case risk over models and the actions of `set`.
pub fn robust_capital(
    amb: &AmbiguitySet,
    node: Node,
    set: &[ActionId],
    cont: &Policy,
    spec: &RiskSpec,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyActionSetArgument);
    }
    let mut worst = f64::NEG_INFINITY;
    for m in amb.models() {
        for &a in set {
            worst = worst.max(interventional_risk(m, node, a, cont, spec)?);
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Irreversibility witnesses
// ---------------------------------------------------------------------------

/// Candidate certificate of uncompensated irreversible tail exposure.
///
/// The event `G` is a set of terminal states of the safe-default rollout; on
/// the common-random-numbers coupling it is the same event for every
/// continuation of `a_plus`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessSpec {
    pub model_index: usize,
    pub event: BTreeSet<StateId>,
    pub delta: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    /// (i) `a_plus` loss dominates pathwise and by `delta` on `G`.
    pub tail_gap: bool,
    /// (ii) no deterministic continuation reduces the gap on `G` by more than `eta`.
    pub irreversible: bool,
    /// (iii) a nonnegative change strictly positive on `G` strictly raises the risk.
    pub strictly_monotone: bool,
    pub event_probability: f64,
    pub min_gap: f64,
    pub min_gap_on_event: f64,
    pub max_reduction: f64,
    pub policies_checked: usize,
    pub risk_before: f64,
    pub risk_after: f64,
}

impl WitnessReport {
    pub fn all_hold(&self) -> bool {
        self.tail_gap && self.irreversible && self.strictly_monotone
    }
}

/// Checks the three witness conditions on model `w.model_index`.
///
/// Condition (ii) uses the uniform reading: for every deterministic Markov
/// continuation `pi'` after `a_plus` and every coupled cell in `G`,
/// `L^{a+, cont} - L^{a+, pi'} <= eta`.
#[allow(clippy::too_many_arguments)]
pub fn verify_witness(
    amb: &AmbiguitySet,
    node: Node,
    a_plus: ActionId,
    cont: &Policy,
    spec: &RiskSpec,
    sdm: &SafeDefaultMap,
    w: &WitnessSpec,
    budget: &EnumerationBudget,
) -> Result<WitnessReport> {
    if !(w.delta > 0.0) || !(w.eta < w.delta) || w.eta < 0.0 {
        return Err(Error::InvalidWitness(format!(
            "need 0 <= eta < delta and delta > 0, got delta = {}, eta = {}",
            w.delta, w.eta
        )));
    }
    let model = amb
        .models()
        .get(w.model_index)
        .ok_or_else(|| Error::InvalidWitness(format!("no model with index {}", w.model_index)))?;
    let a0 = sdm.resolve(model, node, a_plus)?;
    let losses = model.loss_vector();

    let cells = coupled_outcomes(
        model,
        node,
        &[Branch { action: a_plus, cont }, Branch { action: a0, cont }],
    )?;
    let in_event = |s: StateId| w.event.contains(&s);
    let event_probability: f64 = cells.iter().filter(|c| in_event(c.terminals[1])).map(|c| c.prob).sum();
    if event_probability <= 0.0 {
        return Err(Error::InvalidWitness("event has zero probability under the witness model".into()));
    }
    let mut min_gap = f64::INFINITY;
    let mut min_gap_on_event = f64::INFINITY;
    for c in &cells {
        let gap = losses[c.terminals[0].0] - losses[c.terminals[1].0];
        min_gap = min_gap.min(gap);
        if in_event(c.terminals[1]) {
            min_gap_on_event = min_gap_on_event.min(gap);
        }
    }
    let tail_gap = min_gap >= -PATH_TOL && min_gap_on_event >= w.delta - PATH_TOL;

    let after = nodes_after(model, node, a_plus)?;
    let choices = enumerate_policies_over(model, &after, budget)?;
    let mut max_reduction = f64::NEG_INFINITY;
    for choice in &choices {
        let alt = cont.with_overrides(choice);
        let triple = coupled_outcomes(
            model,
            node,
            &[
                Branch { action: a_plus, cont },
                Branch { action: a_plus, cont: &alt },
                Branch { action: a0, cont },
            ],
        )?;
        for c in triple.iter().filter(|c| in_event(c.terminals[2])) {
            let reduction = losses[c.terminals[0].0] - losses[c.terminals[1].0];
            max_reduction = max_reduction.max(reduction);
        }
    }
    let irreversible = max_reduction <= w.eta + PATH_TOL;

    let bump = w.delta - w.eta;
    let mut perturbed = losses.clone();
    for s in &w.event {
        perturbed[s.0] += bump;
    }
    let iv = Intervention::new(model, node, a0)?;
    let risk_before = evaluate_dynamic_risk_with_losses(model, &iv, cont, spec, &losses)?.root_value();
    let risk_after = evaluate_dynamic_risk_with_losses(model, &iv, cont, spec, &perturbed)?.root_value();
    let strictly_monotone = risk_after > risk_before + 1e-12 * (1.0 + risk_before.abs());

    Ok(WitnessReport {
        tail_gap,
        irreversible,
        strictly_monotone,
        event_probability,
        min_gap,
        min_gap_on_event,
        max_reduction,
        policies_checked: choices.len(),
        risk_before,
        risk_after,
    })
}

/// Both parts of the authority-premium result on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IapReport {
    pub premium: f64,
    pub capital_base: f64,
    pub capital_extended: f64,
    pub worst_risk_added: f64,
    /// `K(A0 + a+) > K(A0)`.
    pub capital_increases: bool,
    /// `sup_M rho^M(a+) > K(A0)`.
    pub added_action_binds: bool,
    /// `|K(A0 + a+) - max(K(A0), sup_M rho^M(a+))|`.
    pub decomposition_error: f64,
}

impl IapReport {
    pub fn iff_holds(&self) -> bool {
        self.capital_increases == self.added_action_binds
    }

    pub fn decomposition_holds(&self, tol: f64) -> bool {
        self.decomposition_error <= tol
    }
}

#[allow(clippy::too_many_arguments)]
pub fn iap_check(
    amb: &AmbiguitySet,
    node: Node,
    base: &[ActionId],
    a_plus: ActionId,
    cont: &Policy,
    spec: &RiskSpec,
    sdm: &SafeDefaultMap,
) -> Result<IapReport> {
    if base.contains(&a_plus) {
        return Err(Error::InvalidWitness("added action already belongs to the base set".into()));
    }
    let premium = authority_premium(amb, node, a_plus, cont, spec, sdm)?;
    let capital_base = robust_capital(amb, node, base, cont, spec)?;
    let mut extended = base.to_vec();
    extended.push(a_plus);
    let capital_extended = robust_capital(amb, node, &extended, cont, spec)?;
    let worst_risk_added = robust_capital(amb, node, &[a_plus], cont, spec)?;
    Ok(IapReport {
        premium,
        capital_base,
        capital_extended,
        worst_risk_added,
        capital_increases: capital_extended > capital_base,
        added_action_binds: worst_risk_added > capital_base,
        decomposition_error: (capital_extended - capital_base.max(worst_risk_added)).abs(),
    })
}
