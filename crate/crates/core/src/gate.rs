//! The runtime budget gate.
//!
//! A proposed side-effect-bearing action executes only if its envelope value
//! fits the remaining budget, which is then reduced by that value. Otherwise
//! the configured fallbacks are tried in order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::{BoundaryLedger, BoundarySpec, LedgerRecord};
use crate::envelope::{Envelope, FeatureMap, COVER_TOL};
use crate::error::{Error, Result};
use crate::mdp::{is_side_effect_bearing, pick_index, ActionId, EnvironmentModel, Node, Policy};

/// Accounting and overrun comparisons allow this much rounding, scaled by `1 + B0`.
pub const ACCOUNTING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    Downgrade,
    Escalate,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approval {
    Approve,
    Deny,
}

/// Batch stand-in for a human approver: a fixed answer per action category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedApprover {
    pub default: Approval,
    #[serde(default)]
    pub by_category: BTreeMap<String, Approval>,
}

impl ScriptedApprover {
    pub fn decide(&self, category: &str) -> Approval {
        self.by_category.get(category).copied().unwrap_or(self.default)
    }
}

impl Default for ScriptedApprover {
    fn default() -> Self {
        Self { default: Approval::Deny, by_category: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub initial_budget: f64,
    pub fallback_order: Vec<Fallback>,
    #[serde(default)]
    pub approver: ScriptedApprover,
    /// Affordable proposals quoted above this value also need approval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escalation_threshold: Option<f64>,
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_budget >= 0.0 && self.initial_budget.is_finite()) {
            return Err(Error::InvalidGateConfig(format!(
                "initial budget {} must be finite and nonnegative",
                self.initial_budget
            )));
        }
        if self.fallback_order.is_empty() {
            return Err(Error::InvalidGateConfig("fallback order is empty".into()));
        }
        for (i, f) in self.fallback_order.iter().enumerate() {
            if self.fallback_order[..i].contains(f) {
                return Err(Error::InvalidGateConfig(format!("fallback {f:?} listed twice")));
            }
        }
        if let Some(th) = self.escalation_threshold {
            if !(th >= 0.0) {
                return Err(Error::InvalidGateConfig(format!("escalation threshold {th} is negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Execute,
    Downgrade,
    EscalateApproved,
    EscalateDenied,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub verdict: Verdict,
    pub executed: ActionId,
    pub charged: f64,
    /// Envelope value of the proposed action; zero when it is not priced.
    pub envelope_value: f64,
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: u64,
    pub step: usize,
    pub time: usize,
    pub state: String,
    pub proposed: String,
    pub envelope_value: f64,
    pub verdict: Verdict,
    pub executed: String,
    pub budget_after: f64,
    /// Number of boundary increments applied so far in the episode.
    pub boundary_version: u64,
}

/// A quoted query point, i.e. a member of the evaluated set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuoteRecord {
    pub step: usize,
    pub node: Node,
    pub action: ActionId,
    pub envelope_value: f64,
}

/// Exposure increments of an action, per boundary.
pub type ExposureMap = BTreeMap<ActionId, Vec<(String, Vec<f64>)>>;

/// Everything the gate reads; fixed for a run.
#[derive(Debug, Clone)]
pub struct GateContext<'a> {
    pub model: &'a EnvironmentModel,
    pub envelope: &'a Envelope,
    pub features: FeatureMap,
    pub boundaries: &'a [BoundarySpec],
    pub xi: &'a BTreeMap<String, String>,
    pub exposures: &'a ExposureMap,
}

impl<'a> GateContext<'a> {
    pub fn new(
        model: &'a EnvironmentModel,
        envelope: &'a Envelope,
        boundaries: &'a [BoundarySpec],
        xi: &'a BTreeMap<String, String>,
        exposures: &'a ExposureMap,
    ) -> Self {
        Self { model, envelope, features: FeatureMap::new(model), boundaries, xi, exposures }
    }

    fn quote(&self, node: Node, action: ActionId) -> Result<f64> {
        self.envelope.query(self.model, &self.features.query(self.model, node, action))
    }
}

/// Budget and audit trail of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct GateLedger {
    pub episode: u64,
    pub initial_budget: f64,
    pub budget: f64,
    pub records: Vec<StepRecord>,
    pub charges: Vec<f64>,
    pub quotes: Vec<QuoteRecord>,
    pub boundary_toll: f64,
}

impl GateLedger {
    pub fn new(episode: u64, initial_budget: f64) -> Self {
        Self {
            episode,
            initial_budget,
            budget: initial_budget,
            records: Vec::new(),
            charges: Vec::new(),
            quotes: Vec::new(),
            boundary_toll: 0.0,
        }
    }
}

/// Decides one proposal, applies the executed action's boundary increments
/// and appends the ledger entry. On error nothing is recorded.
pub fn gate_step(
    ledger: &mut GateLedger,
    cfg: &GateConfig,
    ctx: &GateContext<'_>,
    boundaries: &BoundaryLedger,
    node: Node,
    proposed: ActionId,
) -> Result<GateDecision> {
    let model = ctx.model;
    if !model.is_available(node, proposed) {
        return Err(model.unavailable(node, proposed));
    }
    let step = ledger.records.len();
    let budget = ledger.budget;
    let mut quotes = Vec::new();
    let decision = if !is_side_effect_bearing(model, node, proposed)? {
        GateDecision { verdict: Verdict::Execute, executed: proposed, charged: 0.0, envelope_value: 0.0 }
    } else {
        let c = ctx.quote(node, proposed)?;
        quotes.push(QuoteRecord { step, node, action: proposed, envelope_value: c });
        let approval = || cfg.approver.decide(model.category(proposed));
        let fits = c <= budget;
        let needs_approval = cfg.escalation_threshold.is_some_and(|th| c > th);
        let mut decided = None;
        if fits && !needs_approval {
            decided = Some(GateDecision { verdict: Verdict::Execute, executed: proposed, charged: c, envelope_value: c });
        } else if fits && approval() == Approval::Approve {
            decided = Some(GateDecision {
                verdict: Verdict::EscalateApproved,
                executed: proposed,
                charged: c,
                envelope_value: c,
            });
        } else if fits {
            decided = Some(GateDecision {
                verdict: Verdict::EscalateDenied,
                executed: model.noop(),
                charged: 0.0,
                envelope_value: c,
            });
        }
        if decided.is_none() {
            for fb in &cfg.fallback_order {
                match fb {
                    Fallback::Downgrade => {
                        let Ok(a0) = model.safe_defaults().resolve(model, node, proposed) else {
                            continue;
                        };
                        if a0 == proposed {
                            continue;
                        }
                        let c0 = if is_side_effect_bearing(model, node, a0)? {
                            let c0 = ctx.quote(node, a0)?;
                            quotes.push(QuoteRecord { step, node, action: a0, envelope_value: c0 });
                            c0
                        } else {
                            0.0
                        };
                        if c0 <= budget {
                            decided = Some(GateDecision {
                                verdict: Verdict::Downgrade,
                                executed: a0,
                                charged: c0,
                                envelope_value: c,
                            });
                            break;
                        }
                    }
                    // Approval never lifts the budget check, and here c > B.
                    Fallback::Escalate => {
                        if approval() == Approval::Deny {
                            decided = Some(GateDecision {
                                verdict: Verdict::EscalateDenied,
                                executed: model.noop(),
                                charged: 0.0,
                                envelope_value: c,
                            });
                            break;
                        }
                    }
                    Fallback::Block => break,
                }
            }
        }
        decided.unwrap_or(GateDecision {
            verdict: Verdict::Block,
            executed: model.noop(),
            charged: 0.0,
            envelope_value: c,
        })
    };

    // Apply exposure first so a failed commit leaves the ledger untouched.
    let mut toll = 0.0;
    if let Some(incs) = ctx.exposures.get(&decision.executed) {
        for (id, inc) in incs {
            let (lambda, version) = boundaries.quote(id, inc)?;
            boundaries.commit(id, inc, version)?;
            toll += lambda;
        }
    }
    ledger.budget -= decision.charged;
    ledger.boundary_toll += toll;
    ledger.charges.push(decision.charged);
    ledger.quotes.extend(quotes);
    ledger.records.push(StepRecord {
        episode: ledger.episode,
        step,
        time: node.time,
        state: model.state_name(node.state).to_string(),
        proposed: model.action_name(proposed).to_string(),
        envelope_value: decision.envelope_value,
        verdict: decision.verdict,
        executed: model.action_name(decision.executed).to_string(),
        budget_after: ledger.budget,
        boundary_version: boundaries.history().len() as u64,
    });
    Ok(decision)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub ledger: GateLedger,
    pub terminal_state: String,
    pub terminal_loss: f64,
    pub boundary_history: Vec<LedgerRecord>,
}

impl EpisodeLog {
    pub fn final_budget(&self) -> f64 {
        self.ledger.budget
    }

    pub fn charged_total(&self) -> f64 {
        self.ledger.charges.iter().sum()
    }
}

/// The random stream of one episode: the master seed selects the key and the
/// episode index the stream, so episodes are independent of run order.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// Samples a trajectory under `proposal`, gating every proposal.
pub fn run_episode(
    ctx: &GateContext<'_>,
    proposal: &Policy,
    cfg: &GateConfig,
    seed: u64,
    episode: u64,
) -> Result<EpisodeLog> {
    cfg.validate()?;
    let model = ctx.model;
    let mut rng = episode_rng(seed, episode);
    let boundaries = BoundaryLedger::new(ctx.boundaries, ctx.xi)?;
    let mut ledger = GateLedger::new(episode, cfg.initial_budget);
    let mut state = model.root().state;
    for time in 0..model.horizon() {
        let node = Node::new(time, state);
        let row = proposal.row(node).ok_or_else(|| model.policy_undefined(node))?;
        let i = pick_index(row.iter().map(|(_, p)| *p), rng.gen::<f64>()).unwrap_or(0);
        let decision = gate_step(&mut ledger, cfg, ctx, &boundaries, node, row[i].0)?;
        let kernel = model.kernel(node, decision.executed)?;
        let j = pick_index(kernel.iter().map(|(_, p)| *p), rng.gen::<f64>()).unwrap_or(kernel.len() - 1);
        state = kernel[j].0;
    }
    let terminal_loss = model
        .terminal_loss(state)
        .ok_or_else(|| Error::MissingTerminalLoss(model.state_name(state).to_string()))?;
    Ok(EpisodeLog {
        ledger,
        terminal_state: model.state_name(state).to_string(),
        terminal_loss,
        boundary_history: boundaries.history(),
    })
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeAudit {
    pub episode: u64,
    pub executed_true_toll: f64,
    pub charged: f64,
    pub final_budget: f64,
    /// Every quote of the episode covered its true positive toll.
    pub envelope_ok: bool,
    pub overrun: bool,
    pub accounting_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub episodes: usize,
    pub initial_budget: f64,
    pub delta: f64,
    pub overruns: usize,
    pub overrun_fraction: f64,
    pub envelope_violations: usize,
    pub violation_fraction: f64,
    /// `3 * sqrt(delta (1 - delta) / N)`.
    pub slack: f64,
    pub budget_nonnegative: bool,
    pub accounting_exact: bool,
    /// Episodes where every quote covered the truth yet the budget was overrun.
    pub dominance_failures: Vec<u64>,
    pub passed: bool,
    pub per_episode: Vec<EpisodeAudit>,
}

/// Recomputes the true positive toll of every executed action with `oracle`
/// and checks the budget guarantee. With `delta = 0` no overrun is allowed;
/// otherwise the overrun fraction may exceed `delta` by at most the slack.
pub fn audit_budget_guarantee(
    model: &EnvironmentModel,
    logs: &[EpisodeLog],
    oracle: &dyn Fn(Node, ActionId) -> Result<f64>,
    initial_budget: f64,
    delta: f64,
) -> Result<AuditReport> {
    let tol = ACCOUNTING_TOL * (1.0 + initial_budget);
    let lookup = |state: &str, action: &str| -> Result<(crate::StateId, ActionId)> {
        let s = model.state_id(state).map_err(|e| Error::AuditMismatch(e.to_string()))?;
        let a = model.action_id(action).map_err(|e| Error::AuditMismatch(e.to_string()))?;
        Ok((s, a))
    };
    let mut per_episode = Vec::with_capacity(logs.len());
    let mut budget_nonnegative = true;
    for log in logs {
        let l = &log.ledger;
        if l.initial_budget != initial_budget {
            return Err(Error::AuditMismatch(format!(
                "episode {} started with budget {}, expected {initial_budget}",
                l.episode, l.initial_budget
            )));
        }
        let mut executed_true_toll = 0.0;
        for r in &l.records {
            let (s, a) = lookup(&r.state, &r.executed)?;
            executed_true_toll += oracle(Node::new(r.time, s), a)?;
            budget_nonnegative &= r.budget_after >= 0.0;
        }
        let mut envelope_ok = true;
        for q in &l.quotes {
            envelope_ok &= oracle(q.node, q.action)? <= q.envelope_value + COVER_TOL;
        }
        let charged: f64 = l.charges.iter().sum();
        per_episode.push(EpisodeAudit {
            episode: l.episode,
            executed_true_toll,
            charged,
            final_budget: l.budget,
            envelope_ok,
            overrun: executed_true_toll > initial_budget + tol,
            accounting_ok: (charged - (initial_budget - l.budget)).abs() <= tol,
        });
    }
    let n = per_episode.len();
    let overruns = per_episode.iter().filter(|e| e.overrun).count();
    let envelope_violations = per_episode.iter().filter(|e| !e.envelope_ok).count();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let slack = if n == 0 { 0.0 } else { 3.0 * (delta * (1.0 - delta) / n as f64).sqrt() };
    let overrun_fraction = frac(overruns);
    let dominance_failures: Vec<u64> =
        per_episode.iter().filter(|e| e.envelope_ok && e.overrun).map(|e| e.episode).collect();
    let accounting_exact = per_episode.iter().all(|e| e.accounting_ok);
    let within = if delta == 0.0 { overruns == 0 } else { overrun_fraction <= delta + slack };
    Ok(AuditReport {
        episodes: n,
        initial_budget,
        delta,
        overruns,
        overrun_fraction,
        envelope_violations,
        violation_fraction: frac(envelope_violations),
        slack,
        budget_nonnegative,
        accounting_exact,
        passed: within && budget_nonnegative && accounting_exact && dominance_failures.is_empty(),
        dominance_failures,
        per_episode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::exact_envelope;
    use crate::instances::wire_transfer_witness;
    use crate::risk::RiskSpec;

    fn setup() -> (EnvironmentModel, Envelope) {
        let inst = wire_transfer_witness().unwrap();
        let m = inst.ambiguity.models()[0].clone();
        let env = exact_envelope(&m, &inst.cont, &RiskSpec::Entropic { gamma: 0.05 }, m.safe_defaults()).unwrap();
        (m, env)
    }

    fn cfg(b0: f64, order: Vec<Fallback>) -> GateConfig {
        GateConfig { initial_budget: b0, fallback_order: order, approver: ScriptedApprover::default(), escalation_threshold: None }
    }

    fn step(b0: f64, order: Vec<Fallback>) -> (GateDecision, GateLedger, f64) {
        let (m, env) = setup();
        let (b, xi, ex) = (vec![], BTreeMap::new(), ExposureMap::new());
        let ctx = GateContext::new(&m, &env, &b, &xi, &ex);
        let bl = BoundaryLedger::new(&[], &BTreeMap::new()).unwrap();
        let wire = m.action_id("wire_transfer").unwrap();
        let c = ctx.quote(m.root(), wire).unwrap();
        let mut ledger = GateLedger::new(0, b0);
        let d = gate_step(&mut ledger, &cfg(b0, order), &ctx, &bl, m.root(), wire).unwrap();
        (d, ledger, c)
    }

    #[test]
    fn affordable_proposal_executes() {
        let (d, l, c) = step(100.0, vec![Fallback::Block]);
        assert!(c > 0.0);
        assert_eq!(d.verdict, Verdict::Execute);
        assert_eq!(l.budget, 100.0 - c);
    }

    #[test]
    fn unaffordable_proposal_downgrades_for_free() {
        let (d, l, _) = step(0.5, vec![Fallback::Downgrade]);
        assert_eq!(d.verdict, Verdict::Downgrade);
        assert_eq!((d.charged, l.budget), (0.0, 0.5));
        assert_eq!(l.records[0].executed, "draft_payment");
    }

    #[test]
    fn denied_escalation_runs_noop() {
        let (d, _, _) = step(0.5, vec![Fallback::Escalate, Fallback::Downgrade]);
        assert_eq!((d.verdict, d.charged), (Verdict::EscalateDenied, 0.0));
    }

    #[test]
    fn exhausted_fallbacks_block() {
        let (d, _, _) = step(0.0, vec![Fallback::Block, Fallback::Downgrade]);
        assert_eq!(d.verdict, Verdict::Block);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(-1.0, vec![Fallback::Block]).validate().is_err());
        assert!(cfg(1.0, vec![]).validate().is_err());
        assert!(cfg(1.0, vec![Fallback::Block, Fallback::Block]).validate().is_err());
    }
}
