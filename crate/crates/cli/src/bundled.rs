//! The reference scenarios shipped with the binary.

use std::path::Path;

use crate::scenario::{Scenario, ScenarioError, ScenarioFile};

pub const NAMES: [&str; 3] = ["payments", "database", "trading"];

fn text(name: &str) -> Option<&'static str> {
    match name {
        "payments" => Some(include_str!("../scenarios/payments.scn.json")),
        "database" => Some(include_str!("../scenarios/database.scn.json")),
        "trading" => Some(include_str!("../scenarios/trading.scn.json")),
        _ => None,
    }
}

/// Parses and resolves a shipped scenario by name.
pub fn load(name: &str) -> Result<Scenario, ScenarioError> {
    let file = format!("{name}.scn.json");
    let text = text(name).ok_or_else(|| ScenarioError::Io {
        path: file.clone().into(),
        message: "no such bundled scenario".into(),
    })?;
    ScenarioFile::parse(text, Path::new(&file))?.resolve()
}

pub fn file_name(name: &str) -> String {
    format!("{name}.scn.json")
}
