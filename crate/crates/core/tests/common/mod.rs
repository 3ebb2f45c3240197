#![allow(dead_code)]

use serde_json::json;
use tollgate_core::{build_model, EnvironmentModel, ModelSpec};

pub fn model(v: serde_json::Value) -> EnvironmentModel {
    let spec: ModelSpec = serde_json::from_value(v).expect("test spec parses");
    build_model(&spec).expect("test spec is valid")
}

/// Recombining lattice: `depth` coin flips with heads probability `p`, state
/// `k{j}` counts heads, terminal loss is the head count.
pub fn binomial_lattice(depth: usize, p: f64) -> EnvironmentModel {
    let mut states = vec![];
    let mut nodes = vec![];
    let mut losses = serde_json::Map::new();
    for j in 0..=depth {
        states.push(json!({"id": format!("k{j}")}));
        losses.insert(format!("k{j}"), json!(j as f64));
    }
    for t in 0..depth {
        for j in 0..=t {
            nodes.push(json!({
                "time": t, "state": format!("k{j}"),
                "actions": [{"action": "noop", "next": [[format!("k{}", j + 1), p], [format!("k{j}"), 1.0 - p]]}]
            }));
        }
    }
    model(json!({
        "horizon": depth, "states": states, "initial_state": "k0",
        "nodes": nodes, "terminal_loss": losses
    }))
}

/// Deterministic chain of length `len` ending in a single leaf with `loss`.
pub fn deterministic_chain(len: usize, loss: f64) -> EnvironmentModel {
    let mut states = vec![];
    let mut nodes = vec![];
    for t in 0..=len {
        states.push(json!({"id": format!("c{t}")}));
    }
    for t in 0..len {
        nodes.push(json!({
            "time": t, "state": format!("c{t}"),
            "actions": [{"action": "noop", "next": [[format!("c{}", t + 1), 1.0]]}]
        }));
    }
    model(json!({
        "horizon": len, "states": states, "initial_state": "c0",
        "nodes": nodes, "terminal_loss": {format!("c{len}"): loss}
    }))
}

/// One decision node with deterministic outcomes: every `(action, loss)`
/// leads to its own leaf. The first action is the safe default of all others.
/// `levels` lists all leaf losses in skeleton order so that models built
/// with different assignments share one skeleton.
pub fn one_shot(actions: &[(&str, usize)], levels: &[f64]) -> EnvironmentModel {
    let mut states = vec![json!({"id": "root", "values": [0]})];
    let mut losses = serde_json::Map::new();
    for (i, l) in levels.iter().enumerate() {
        states.push(json!({"id": format!("leaf{i}"), "values": [i as i64 + 1]}));
        losses.insert(format!("leaf{i}"), json!(l));
    }
    states.push(json!({"id": "idle", "values": [0]}));
    losses.insert("idle".into(), json!(0.0));
    let mut acts = vec![json!({"action": "noop", "next": [["idle", 1.0]]})];
    for (a, leaf) in actions {
        acts.push(json!({"action": a, "next": [[format!("leaf{leaf}"), 1.0]]}));
    }
    let defaults: Vec<_> = actions[1..]
        .iter()
        .map(|(a, _)| json!({"action": a, "default": actions[0].0}))
        .collect();
    model(json!({
        "horizon": 1,
        "components": [{"name": "ledger", "external": true}],
        "states": states, "initial_state": "root",
        "nodes": [{"time": 0, "state": "root", "actions": acts}],
        "terminal_loss": losses,
        "safe_defaults": defaults
    }))
}
