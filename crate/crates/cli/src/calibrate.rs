//! The `calibrate` command: fits a conformal envelope from frozen-policy
//! rollouts and writes the calibration set.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tollgate_core::envelope::{EnvelopeMeta, FeatureMap, Predictor};

use crate::error::CliError;
use crate::scenario::{load_scenario, ConfigHash, EnvelopeConfig, Scenario};

pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const ENVELOPE_FILE: &str = "envelope.json";

/// Used when the scenario does not configure a conformal envelope.
pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_TRAINING_SIZE: usize = 300;

/// Envelope metadata written next to the calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationManifest {
    pub scenario: String,
    pub scenario_file: String,
    pub seed: u64,
    pub training_size: usize,
    pub config_hash: ConfigHash,
    pub envelope: EnvelopeMeta,
    pub feature_names: Vec<String>,
    pub predictor_weights: Vec<f64>,
}

fn defaults(scenario: &Scenario) -> (f64, usize) {
    match scenario.file.envelope {
        EnvelopeConfig::Conformal { delta, training_size, .. } => (delta, training_size),
        EnvelopeConfig::Exact => (DEFAULT_DELTA, DEFAULT_TRAINING_SIZE),
    }
}

/// Fits with `n` calibration points; `delta` and `seed` default to the
/// scenario's values. Errors before any rollout when `n` is too small.
pub fn cmd_calibrate(
    scenario_path: &Path,
    n: usize,
    delta: Option<f64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<CalibrationManifest, CliError> {
    let scenario = load_scenario(scenario_path)?;
    let (default_delta, training_size) = defaults(&scenario);
    let delta = delta.unwrap_or(default_delta);
    let seed = seed.unwrap_or(scenario.file.seed);
    let fit = scenario.conformal_fit(seed, delta, n, training_size)?;
    let model = scenario.model();
    let names = FeatureMap::new(model).names(model);

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join(CALIBRATION_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
    let mut header = vec!["index".to_string(), "state".into(), "action".into()];
    header.extend(names.iter().cloned());
    header.extend(["predicted", "true_positive_toll", "residual"].map(String::from));
    w.write_record(&header).map_err(|e| CliError::io(&path, e))?;
    for (i, q) in fit.calibration.iter().enumerate() {
        let p = q.point.node;
        let predicted = fit.predictor.predict(&q.point);
        let mut rec = vec![
            i.to_string(),
            model.state_name(p.state).to_string(),
            model.action_name(q.point.action).to_string(),
        ];
        rec.extend(q.point.features.iter().map(f64::to_string));
        rec.extend([predicted, q.true_toll, q.true_toll - predicted].map(|x| x.to_string()));
        w.write_record(&rec).map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let manifest = CalibrationManifest {
        scenario: scenario.file.name.clone(),
        scenario_file: scenario_path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        seed,
        training_size,
        config_hash: scenario.config_hash(),
        envelope: fit.envelope.meta().clone(),
        feature_names: names,
        predictor_weights: fit.predictor.weights.clone(),
    };
    let path = out.join(ENVELOPE_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::io(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}
