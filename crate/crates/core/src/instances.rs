//! Built-in model instances: payment witnesses and a trading desk.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::Result;
use crate::mdp::{
    build_model, ActionId, ActionSpec, ComponentSpec, ModelSpec, Node, NodeSpec, Policy,
    SafeDefaultEntry, SafeDefaultMap, StateSpec,
};
use crate::risk::RiskSpec;
use crate::toll::{AmbiguitySet, WitnessSpec};

/// An ambiguity set together with the action, base set and witness under test.
#[derive(Debug, Clone)]
pub struct WitnessInstance {
    pub name: &'static str,
    pub ambiguity: AmbiguitySet,
    pub node: Node,
    pub a_plus: ActionId,
    pub base: Vec<ActionId>,
    pub cont: Policy,
    pub spec: RiskSpec,
    pub witness: WitnessSpec,
}

impl WitnessInstance {
    pub fn safe_defaults(&self) -> &SafeDefaultMap {
        self.ambiguity.reference().safe_defaults()
    }
}

/// Small helper for writing model descriptions inline.
#[derive(Default)]
struct Builder {
    components: Vec<ComponentSpec>,
    states: Vec<StateSpec>,
    nodes: Vec<NodeSpec>,
    losses: BTreeMap<String, f64>,
    defaults: Vec<SafeDefaultEntry>,
}

impl Builder {
    fn component(mut self, name: &str, external: bool) -> Self {
        self.components.push(ComponentSpec { name: name.into(), external });
        self
    }

    fn state(mut self, id: &str, values: &[i64]) -> Self {
        self.states.push(StateSpec { id: id.into(), values: values.to_vec() });
        self
    }

    fn terminal(self, id: &str, values: &[i64], loss: f64) -> Self {
        let mut b = self.state(id, values);
        b.losses.insert(id.into(), loss);
        b
    }

    fn node(mut self, time: usize, state: &str, actions: &[(&str, &[(&str, f64)])]) -> Self {
        self.nodes.push(NodeSpec {
            time,
            state: state.into(),
            actions: actions
                .iter()
                .map(|(a, row)| ActionSpec {
                    action: (*a).into(),
                    next: row.iter().map(|(s, p)| ((*s).into(), *p)).collect(),
                })
                .collect(),
        });
        self
    }

    fn safe_default(mut self, action: &str, default: &str) -> Self {
        self.defaults.push(SafeDefaultEntry {
            action: action.into(),
            default: default.into(),
            time: None,
            state: None,
        });
        self
    }

    fn spec(self, horizon: usize, initial: &str) -> ModelSpec {
        ModelSpec {
            horizon,
            components: self.components,
            states: self.states,
            initial_state: initial.into(),
            noop: "noop".into(),
            nodes: self.nodes,
            terminal_loss: self.losses,
            safe_defaults: self.defaults,
            categories: BTreeMap::new(),
        }
    }
}

/// Parameters of the depth-3 payment tree.
#[derive(Debug, Clone, PartialEq)]
pub struct PaymentParams {
    /// Fraud probability, one entry per admissible model.
    pub fraud_rates: Vec<f64>,
    /// Loss when a fraudulent wire goes through.
    pub lost: f64,
    /// Loss when a fraudulent wire is recalled.
    pub recalled: f64,
    pub wire_fee: f64,
    pub review_cost: f64,
    pub hold_cost: f64,
    /// Loss of an unverified card payment under fraud, when that action exists.
    pub card_loss: Option<f64>,
}

impl Default for PaymentParams {
    fn default() -> Self {
        Self {
            fraud_rates: vec![0.1, 0.2],
            lost: 100.0,
            recalled: 80.0,
            wire_fee: 1.0,
            review_cost: 1.0,
            hold_cost: 5.0,
            card_loss: None,
        }
    }
}

/// Depth-3 payment tree: decide at t0, fraud is revealed at t1, a recall is
/// possible at t2 after a wire. A draft lets the reviewer catch fraud.
pub fn payment_spec(p: &PaymentParams, fraud: f64) -> ModelSpec {
    let ok = 1.0 - fraud;
    let held = [("held", 1.0)];
    let drafted = [("drafted", 1.0)];
    let wired = [("wired", 1.0)];
    let carded = [("carded", 1.0)];
    let mut root: Vec<(&str, &[(&str, f64)])> = vec![("noop", &held), ("draft_payment", &drafted)];
    if p.card_loss.is_some() {
        root.push(("card_payment_unverified", &carded));
    }
    root.push(("wire_transfer", &wired));

    let mut b = Builder::default()
        .component("ledger", true)
        .component("fraud", false)
        .state("pending", &[0, 0])
        .state("held", &[0, 0])
        .state("drafted", &[0, 0])
        .state("wired", &[1, 0])
        .state("held_fraud", &[0, 1])
        .state("held_ok", &[0, 0])
        .state("drafted_fraud", &[0, 1])
        .state("drafted_ok", &[0, 0])
        .state("wired_fraud", &[1, 1])
        .state("wired_ok", &[1, 0])
        .terminal("expired", &[0, 0], p.hold_cost)
        .terminal("caught", &[0, 1], 0.0)
        .terminal("reviewed", &[0, 0], p.review_cost)
        .terminal("settled", &[1, 0], p.wire_fee)
        .terminal("lost", &[1, 1], p.lost)
        .terminal("recalled", &[1, 1], p.recalled)
        .node(0, "pending", &root)
        .node(1, "held", &[("noop", &[("held_fraud", fraud), ("held_ok", ok)])])
        .node(1, "drafted", &[("noop", &[("drafted_fraud", fraud), ("drafted_ok", ok)])])
        .node(1, "wired", &[("noop", &[("wired_fraud", fraud), ("wired_ok", ok)])])
        .node(2, "held_fraud", &[("noop", &[("expired", 1.0)])])
        .node(2, "held_ok", &[("noop", &[("expired", 1.0)])])
        .node(2, "drafted_fraud", &[("noop", &[("caught", 1.0)])])
        .node(2, "drafted_ok", &[("noop", &[("reviewed", 1.0)])])
        .node(2, "wired_fraud", &[("noop", &[("lost", 1.0)]), ("recall", &[("recalled", 1.0)])])
        .node(2, "wired_ok", &[("noop", &[("settled", 1.0)])])
        .safe_default("wire_transfer", "draft_payment");
    if let Some(card_loss) = p.card_loss {
        b = b
            .state("carded", &[1, 0])
            .state("carded_fraud", &[1, 1])
            .state("carded_ok", &[1, 0])
            .terminal("charged_back", &[1, 1], card_loss)
            .node(1, "carded", &[("noop", &[("carded_fraud", fraud), ("carded_ok", ok)])])
            .node(2, "carded_fraud", &[("noop", &[("charged_back", 1.0)])])
            .node(2, "carded_ok", &[("noop", &[("settled", 1.0)])])
            .safe_default("card_payment_unverified", "draft_payment");
    }
    b.spec(3, "pending")
}

/// Builds the payment instance; the witness sits on the last model and on
/// the event that the reviewer catches fraud.
pub fn payment_instance(
    name: &'static str,
    p: &PaymentParams,
    spec: RiskSpec,
    delta: f64,
    eta: f64,
) -> Result<WitnessInstance> {
    let models = p
        .fraud_rates
        .iter()
        .map(|&f| build_model(&payment_spec(p, f)))
        .collect::<Result<Vec<_>>>()?;
    let ambiguity = AmbiguitySet::new(models)?;
    let m = ambiguity.reference();
    let node = m.root();
    let a_plus = m.action_id("wire_transfer")?;
    let mut base = vec![m.noop(), m.action_id("draft_payment")?];
    if p.card_loss.is_some() {
        base.push(m.action_id("card_payment_unverified")?);
    }
    let cont = Policy::noop(m);
    let witness = WitnessSpec {
        model_index: p.fraud_rates.len() - 1,
        event: BTreeSet::from([m.state_id("caught")?]),
        delta,
        eta,
    };
    Ok(WitnessInstance { name, ambiguity, node, a_plus, base, cont, spec, witness })
}

const PAYMENT_RISK: RiskSpec = RiskSpec::Entropic { gamma: 0.05 };

/// Wire transfer against a draft payment for approval. A recall after fraud
/// only cuts the loss from 100 to 80, so the gap on the fraud event is
/// irreversible up to 20 < eta.
pub fn wire_transfer_witness() -> Result<WitnessInstance> {
    payment_instance("wire_transfer_vs_draft", &PaymentParams::default(), PAYMENT_RISK, 100.0, 25.0)
}

/// Same as [`wire_transfer_witness`] but the base set already holds an
/// unverified card payment that is riskier than the wire.
pub fn riskier_incumbent_witness() -> Result<WitnessInstance> {
    let p = PaymentParams { card_loss: Some(150.0), ..PaymentParams::default() };
    payment_instance("wire_transfer_with_card_incumbent", &p, PAYMENT_RISK, 100.0, 25.0)
}

/// A recall recovers the full amount, so a continuation can hedge the gap.
pub fn hedgeable_witness() -> Result<WitnessInstance> {
    let p = PaymentParams { recalled: 0.0, ..PaymentParams::default() };
    payment_instance("wire_transfer_full_recall", &p, PAYMENT_RISK, 100.0, 25.0)
}

/// One-step instance whose gap sits on a low-loss event far below the upper
/// 10% tail: raising the loss there moves entropic risk but not ES at 0.9.
pub fn below_tail_witness(spec: RiskSpec) -> Result<WitnessInstance> {
    let quiet: &[(&str, f64)] = &[("quiet", 0.5), ("busy", 0.45), ("outage", 0.05)];
    let b = Builder::default()
        .component("released", true)
        .state("open", &[0])
        .terminal("quiet", &[0], 0.0)
        .terminal("quiet_released", &[1], 6.0)
        .terminal("busy", &[0], 10.0)
        .terminal("outage", &[0], 100.0)
        .node(
            0,
            "open",
            &[
                ("noop", quiet),
                ("hold_order", quiet),
                ("release_order", &[("quiet_released", 0.5), ("busy", 0.45), ("outage", 0.05)]),
            ],
        )
        .safe_default("release_order", "hold_order");
    let model = build_model(&b.spec(1, "open"))?;
    let node = model.root();
    let a_plus = model.action_id("release_order")?;
    let base = vec![model.noop(), model.action_id("hold_order")?];
    let cont = Policy::noop(&model);
    let witness = WitnessSpec {
        model_index: 0,
        event: BTreeSet::from([model.state_id("quiet")?]),
        delta: 6.0,
        eta: 1.0,
    };
    Ok(WitnessInstance {
        name: "release_below_tail",
        ambiguity: AmbiguitySet::new(vec![model])?,
        node,
        a_plus,
        base,
        cont,
        spec,
        witness,
    })
}

/// Volatility of regime `i` out of `regimes`; convex in the regime index.
pub fn trading_volatility(i: usize, regimes: usize) -> f64 {
    let x = if regimes > 1 { i as f64 / (regimes - 1) as f64 } else { 0.0 };
    0.5 + 4.5 * x * x
}

/// Two-step trading desk. A volatility regime is drawn at t0; at t1 the
/// agent can stay idle, paper trade (the safe default), or execute a small
/// or large order whose downside grows with the regime's volatility.
///
/// Components are the open position (external) and the regime index.
pub fn trading_spec(regimes: usize) -> ModelSpec {
    const DOWN: f64 = 0.4;
    let regimes = regimes.max(1);
    let mut states = vec![StateSpec { id: "open".into(), values: vec![0, 0] }];
    let mut nodes = Vec::new();
    let mut terminal_loss = BTreeMap::new();
    let mut draw = Vec::new();
    for i in 0..regimes {
        let v = i as i64;
        let sigma = trading_volatility(i, regimes);
        let r = format!("r{i}");
        states.push(StateSpec { id: r.clone(), values: vec![0, v] });
        let leaves = [
            (format!("idle{i}"), 0, 0.0),
            (format!("small_up{i}"), 1, 0.0),
            (format!("small_down{i}"), 1, sigma),
            (format!("large_up{i}"), 2, 0.0),
            (format!("large_down{i}"), 2, 3.0 * sigma + 0.2 * sigma * sigma),
        ];
        for (id, pos, loss) in &leaves {
            states.push(StateSpec { id: id.clone(), values: vec![*pos, v] });
            terminal_loss.insert(id.clone(), *loss);
        }
        let to = |k: usize, p: f64| (leaves[k].0.clone(), p);
        let act = |name: &str, next: Vec<(String, f64)>| ActionSpec { action: name.into(), next };
        nodes.push(NodeSpec {
            time: 1,
            state: r.clone(),
            actions: vec![
                act("noop", vec![to(0, 1.0)]),
                act("paper_trade", vec![to(0, 1.0)]),
                act("execute_small", vec![to(1, 1.0 - DOWN), to(2, DOWN)]),
                act("execute_large", vec![to(3, 1.0 - DOWN), to(4, DOWN)]),
            ],
        });
        draw.push((r, 1.0 / regimes as f64));
    }
    let head: f64 = draw[..regimes - 1].iter().map(|(_, p)| p).sum();
    draw[regimes - 1].1 = 1.0 - head;
    nodes.insert(0, NodeSpec { time: 0, state: "open".into(), actions: vec![ActionSpec { action: "noop".into(), next: draw }] });
    let entry = |a: &str| SafeDefaultEntry { action: a.into(), default: "paper_trade".into(), time: None, state: None };
    ModelSpec {
        horizon: 2,
        components: vec![
            ComponentSpec { name: "position".into(), external: true },
            ComponentSpec { name: "regime".into(), external: false },
        ],
        states,
        initial_state: "open".into(),
        noop: "noop".into(),
        nodes,
        terminal_loss,
        safe_defaults: vec![entry("execute_small"), entry("execute_large")],
        categories: [("paper_trade", "paper"), ("execute_small", "trade_small"), ("execute_large", "trade_large")]
            .into_iter()
            .map(|(a, c)| (a.to_string(), c.to_string()))
            .collect(),
    }
}
