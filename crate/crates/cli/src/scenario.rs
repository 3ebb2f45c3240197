//! Scenario documents: parsing, reference resolution and validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tollgate_core::boundary::BoundarySpec;
use tollgate_core::envelope::{
    conformal_rank, exact_envelope, fit_conformal_envelope, Envelope, FeatureMap, LinearPredictor, QueryPoint,
};
use tollgate_core::gate::{episode_rng, ExposureMap, GateConfig, GateContext};
use tollgate_core::mdp::{is_side_effect_bearing, pick_index, ModelSpec, PolicySpec};
use tollgate_core::oracle::{recursive_risk_by_paths, EnumerationBudget};
use tollgate_core::toll::{counterfactual_toll, AmbiguitySet};
use tollgate_core::{build_model, ActionId, EnvironmentModel, Intervention, Node, Policy, RiskSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Stream offsets that keep envelope fitting independent of episode draws.
const TRAINING_STREAM: u64 = 1 << 62;
const CALIBRATION_STREAM: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{field}: unresolved reference: {message}")]
    Reference { field: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ScenarioError {
    /// Process exit code; each failure class has its own.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } => 3,
            Self::Reference { .. } => 4,
            Self::Invalid { .. } => 5,
            Self::Io { .. } => 6,
        }
    }
}

/// A kernel row replacing the reference model's row in one admissible model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelOverride {
    pub time: usize,
    pub state: String,
    pub action: String,
    pub next: Vec<(String, f64)>,
}

/// One extra member of the ambiguity set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub name: String,
    pub rows: Vec<KernelOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureSpec {
    pub boundary: String,
    pub increment: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvelopeConfig {
    Exact,
    /// Linear base predictor fit on `training_size` rollout points, then
    /// split-conformal margin from `calibration_size` fresh points.
    Conformal { delta: f64, calibration_size: usize, training_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub ambiguity: Vec<Perturbation>,
    pub risk: RiskSpec,
    #[serde(default)]
    pub continuation_policy: PolicySpec,
    pub proposal_policy: PolicySpec,
    #[serde(default)]
    pub boundaries: Vec<BoundarySpec>,
    #[serde(default)]
    pub exposures: BTreeMap<String, Vec<ExposureSpec>>,
    #[serde(default)]
    pub xi: BTreeMap<String, String>,
    pub gate: GateConfig,
    pub envelope: EnvelopeConfig,
    pub seed: u64,
}

/// A resolved scenario. The first ambiguity member is the reference model
/// the gate runs against.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub ambiguity: AmbiguitySet,
    pub cont: Policy,
    pub proposal: Policy,
    pub exposures: ExposureMap,
}

fn invalid(field: impl Into<String>, message: impl ToString) -> ScenarioError {
    ScenarioError::Invalid { field: field.into(), message: message.to_string() }
}

fn classify(field: String, err: tollgate_core::Error) -> ScenarioError {
    use tollgate_core::Error as E;
    match err {
        E::UnknownState(_)
        | E::UnknownAction(_)
        | E::UnknownNode { .. }
        | E::UnknownBoundary(_)
        | E::DanglingTarget { .. }
        | E::MissingRoot(_) => ScenarioError::Reference { field, message: err.to_string() },
        _ => invalid(field, err),
    }
}

/// Field path of the node or action a model error names, when it names one.
fn model_path(spec: &ModelSpec, err: &tollgate_core::Error) -> String {
    use tollgate_core::Error as E;
    let (time, state, action) = match err {
        E::KernelRowSum { time, state, action, .. }
        | E::InvalidProbability { time, state, action, .. }
        | E::DanglingTarget { time, state, action, .. }
        | E::DuplicateAction { time, state, action } => (*time, state, Some(action)),
        E::DuplicateNode { time, state }
        | E::NodeBeyondHorizon { time, state }
        | E::EmptyActionSet { time, state }
        | E::MissingNoop { time, state, .. } => (*time, state, None),
        E::MissingSafeDefault { .. } | E::SafeDefaultUnavailable { .. } | E::SafeDefaultNotIdempotent { .. } => {
            return "model.safe_defaults".into()
        }
        E::InvalidLoss { .. } | E::MissingTerminalLoss(_) => return "model.terminal_loss".into(),
        _ => return "model".into(),
    };
    let Some(i) = spec.nodes.iter().position(|n| n.time == time && &n.state == state) else {
        return "model.nodes".into();
    };
    match action.and_then(|a| spec.nodes[i].actions.iter().position(|x| &x.action == a)) {
        Some(j) => format!("model.nodes[{i}].actions[{j}]"),
        None => format!("model.nodes[{i}]"),
    }
}

fn build(spec: &ModelSpec, prefix: &str) -> Result<EnvironmentModel, ScenarioError> {
    build_model(spec).map_err(|e| {
        let path = model_path(spec, &e);
        classify(path.replacen("model", prefix, 1), e)
    })
}

fn apply_perturbation(base: &ModelSpec, p: &Perturbation, index: usize) -> Result<ModelSpec, ScenarioError> {
    let mut spec = base.clone();
    for (k, row) in p.rows.iter().enumerate() {
        let field = format!("ambiguity[{index}].rows[{k}]");
        let node = spec
            .nodes
            .iter_mut()
            .find(|n| n.time == row.time && n.state == row.state)
            .ok_or_else(|| ScenarioError::Reference {
                field: field.clone(),
                message: format!("no node ({}, {})", row.time, row.state),
            })?;
        let action = node
            .actions
            .iter_mut()
            .find(|a| a.action == row.action)
            .ok_or_else(|| ScenarioError::Reference {
                field,
                message: format!("action '{}' is not available at ({}, {})", row.action, row.time, row.state),
            })?;
        action.next = row.next.clone();
    }
    Ok(spec)
}

impl ScenarioFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// Resolves every reference and checks every invariant.
    pub fn resolve(self) -> Result<Scenario, ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let reference = build(&self.model, "model")?;
        reference
            .safe_defaults()
            .check_complete(&reference)
            .map_err(|e| classify("model.safe_defaults".into(), e))?;
        let mut models = vec![reference];
        for (i, p) in self.ambiguity.iter().enumerate() {
            let spec = apply_perturbation(&self.model, p, i)?;
            models.push(build(&spec, &format!("ambiguity[{i}]"))?);
        }
        let ambiguity = AmbiguitySet::new(models).map_err(|e| invalid("ambiguity", e))?;
        let model = ambiguity.reference();
        self.risk.validate().map_err(|e| invalid("risk", e))?;
        let cont = Policy::from_spec(model, &self.continuation_policy)
            .map_err(|e| classify("continuation_policy".into(), e))?;
        let proposal =
            Policy::from_spec(model, &self.proposal_policy).map_err(|e| classify("proposal_policy".into(), e))?;
        for (i, b) in self.boundaries.iter().enumerate() {
            b.validate().map_err(|e| invalid(format!("boundaries[{i}]"), e))?;
        }
        let mut exposures = ExposureMap::new();
        for (action, incs) in &self.exposures {
            let field = format!("exposures.{action}");
            let a = model.action_id(action).map_err(|e| classify(field.clone(), e))?;
            let mut list = Vec::new();
            for (k, inc) in incs.iter().enumerate() {
                let field = format!("{field}[{k}]");
                let b = self.boundaries.iter().find(|b| b.id == inc.boundary).ok_or_else(|| {
                    ScenarioError::Reference { field: field.clone(), message: format!("unknown boundary '{}'", inc.boundary) }
                })?;
                if inc.increment.len() != b.dimension || inc.increment.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                    return Err(invalid(
                        field,
                        format!("increment must have {} finite nonnegative components", b.dimension),
                    ));
                }
                list.push((inc.boundary.clone(), inc.increment.clone()));
            }
            exposures.insert(a, list);
        }
        for id in self.xi.keys() {
            if !self.boundaries.iter().any(|b| &b.id == id) {
                return Err(ScenarioError::Reference { field: format!("xi.{id}"), message: "unknown boundary".into() });
            }
        }
        self.gate.validate().map_err(|e| invalid("gate", e))?;
        if let EnvelopeConfig::Conformal { delta, calibration_size, training_size } = self.envelope {
            tollgate_core::envelope::conformal_rank(calibration_size, delta).map_err(|e| invalid("envelope", e))?;
            if training_size == 0 {
                return Err(invalid("envelope.training_size", "must be positive"));
            }
        }
        Ok(Scenario { file: self, ambiguity, cont, proposal, exposures })
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    ScenarioFile::parse(&text, path)?.resolve()
}

/// A fitted conformal envelope with the data behind it.
#[derive(Debug, Clone)]
pub struct ConformalFit {
    pub envelope: Envelope,
    pub predictor: Arc<LinearPredictor>,
    pub training: Vec<LabeledQuery>,
    pub calibration: Vec<LabeledQuery>,
}

/// A priced query with its true positive toll.
#[derive(Debug, Clone)]
pub struct LabeledQuery {
    pub point: QueryPoint,
    pub true_toll: f64,
}

fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("scenario parts serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Hashes of the primitives that fix every toll: safe defaults, continuation
/// policy, risk spec, boundaries and the admissible models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigHash {
    pub safe_defaults: String,
    pub continuation_policy: String,
    pub risk: String,
    pub boundaries: String,
    pub models: String,
    /// Hash over the five parts above.
    pub combined: String,
}

impl Scenario {
    pub fn model(&self) -> &EnvironmentModel {
        self.ambiguity.reference()
    }

    pub fn config_hash(&self) -> ConfigHash {
        let f = &self.file;
        let mut model = f.model.clone();
        let safe_defaults = digest(&std::mem::take(&mut model.safe_defaults));
        let continuation_policy = digest(&f.continuation_policy);
        let risk = digest(&f.risk);
        let boundaries = digest(&(&f.boundaries, &f.exposures, &f.xi));
        let models = digest(&(&model, &f.ambiguity));
        let combined = digest(&[&safe_defaults, &continuation_policy, &risk, &boundaries, &models]);
        ConfigHash { safe_defaults, continuation_policy, risk, boundaries, models, combined }
    }

    /// True positive toll on the reference model.
    pub fn true_toll(&self, node: Node, action: ActionId) -> tollgate_core::Result<f64> {
        let m = self.model();
        Ok(counterfactual_toll(m, node, action, &self.cont, &self.file.risk, m.safe_defaults())?.positive_toll)
    }

    /// True positive toll recomputed on the explicit history tree; independent
    /// of the backward-induction engine behind [`Self::true_toll`].
    pub fn oracle_toll(&self, node: Node, action: ActionId) -> tollgate_core::Result<f64> {
        let m = self.model();
        let default = m.safe_defaults().resolve(m, node, action)?;
        if default == action {
            return Ok(0.0);
        }
        let losses = m.loss_vector();
        let budget = EnumerationBudget::default();
        let risk = |a| {
            let iv = Intervention::new(m, node, a)?;
            recursive_risk_by_paths(m, &iv, &self.cont, &self.file.risk, &losses, &budget)
        };
        Ok((risk(action)? - risk(default)?).max(0.0))
    }

    /// Priced proposals along ungated rollouts of the frozen proposal policy.
    pub fn rollout_queries(&self, seed: u64, stream: u64, count: usize) -> tollgate_core::Result<Vec<LabeledQuery>> {
        let m = self.model();
        let features = FeatureMap::new(m);
        let mut cache: BTreeMap<(Node, ActionId), f64> = BTreeMap::new();
        let mut out = Vec::with_capacity(count);
        let mut episode = 0u64;
        // Stops after a fixed number of rollouts without a priced proposal.
        let mut dry = 0usize;
        while out.len() < count {
            let mut rng = episode_rng(seed, stream + episode);
            episode += 1;
            let mut state = m.root().state;
            let before = out.len();
            for time in 0..m.horizon() {
                let node = Node::new(time, state);
                let row = self.proposal.row(node).ok_or_else(|| tollgate_core::Error::PolicyUndefined {
                    time,
                    state: m.state_name(state).to_string(),
                })?;
                let i = pick_index(row.iter().map(|(_, p)| *p), rng.gen::<f64>()).unwrap_or(0);
                let a = row[i].0;
                if is_side_effect_bearing(m, node, a)? && out.len() < count {
                    let y = match cache.get(&(node, a)) {
                        Some(y) => *y,
                        None => {
                            let y = self.true_toll(node, a)?;
                            cache.insert((node, a), y);
                            y
                        }
                    };
                    out.push(LabeledQuery { point: features.query(m, node, a), true_toll: y });
                }
                let kernel = m.kernel(node, a)?;
                let j = pick_index(kernel.iter().map(|(_, p)| *p), rng.gen::<f64>()).unwrap_or(kernel.len() - 1);
                state = kernel[j].0;
            }
            dry = if out.len() == before { dry + 1 } else { 0 };
            if dry > 10_000 {
                return Err(tollgate_core::Error::InvalidCalibration(
                    "the proposal policy never proposes a priced action".into(),
                ));
            }
        }
        Ok(out)
    }

    /// Builds the configured envelope. Conformal envelopes are fit from
    /// rollouts on streams disjoint from the episode streams of `seed`.
    pub fn envelope(&self, seed: u64) -> tollgate_core::Result<Envelope> {
        match self.file.envelope {
            EnvelopeConfig::Exact => self.exact_envelope(),
            EnvelopeConfig::Conformal { delta, calibration_size, training_size } => {
                Ok(self.conformal_fit(seed, delta, calibration_size, training_size)?.envelope)
            }
        }
    }

    pub fn exact_envelope(&self) -> tollgate_core::Result<Envelope> {
        let m = self.model();
        exact_envelope(m, &self.cont, &self.file.risk, m.safe_defaults())
    }

    pub fn conformal_fit(
        &self,
        seed: u64,
        delta: f64,
        calibration_size: usize,
        training_size: usize,
    ) -> tollgate_core::Result<ConformalFit> {
        let pairs = |qs: &[LabeledQuery]| -> Vec<(QueryPoint, f64)> {
            qs.iter().map(|q| (q.point.clone(), q.true_toll)).collect()
        };
        // Check the rank first so an undersized request fails before any rollout.
        conformal_rank(calibration_size, delta)?;
        let training = self.rollout_queries(seed, TRAINING_STREAM, training_size)?;
        let predictor = Arc::new(LinearPredictor::fit(&pairs(&training))?);
        let calibration = self.rollout_queries(seed, CALIBRATION_STREAM, calibration_size)?;
        let envelope = fit_conformal_envelope(predictor.clone(), &pairs(&calibration), delta)?;
        Ok(ConformalFit { envelope, predictor, training, calibration })
    }

    pub fn context<'a>(&'a self, envelope: &'a Envelope) -> GateContext<'a> {
        GateContext::new(self.model(), envelope, &self.file.boundaries, &self.file.xi, &self.exposures)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundled(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.scn.json"))
    }

    fn edit(name: &str, f: impl FnOnce(&mut serde_json::Value)) -> Result<Scenario, ScenarioError> {
        let text = fs::read_to_string(bundled(name)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        f(&mut v);
        ScenarioFile::parse(&v.to_string(), Path::new("edited.json"))?.resolve()
    }

    #[test]
    fn bundled_scenarios_load() {
        for name in ["payments", "database", "trading"] {
            let s = load_scenario(&bundled(name)).unwrap();
            assert_eq!(s.file.name, name);
        }
    }

    #[test]
    fn short_kernel_row_names_the_row() {
        let err = edit("payments", |v| v["model"]["nodes"][1]["actions"][0]["next"][1][1] = 0.8.into()).unwrap_err();
        assert_eq!(err.exit_code(), 5);
        let msg = err.to_string();
        assert!(msg.starts_with("model.nodes[1].actions[0]"), "{msg}");
        assert!(msg.contains("waiting") && msg.contains("sums to 0.9"), "{msg}");
    }

    #[test]
    fn missing_safe_default_is_rejected() {
        let err = edit("payments", |v| v["model"]["safe_defaults"] = serde_json::json!([])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("model.safe_defaults"), "{msg}");
        assert!(msg.contains("pay_invoice") && msg.contains("safe default"), "{msg}");
    }

    #[test]
    fn error_classes_have_distinct_codes() {
        let parse = ScenarioFile::parse("{ not json", Path::new("x.json")).unwrap_err();
        assert_eq!(parse.exit_code(), 3);
        let reference = edit("payments", |v| v["exposures"]["pay_invoice"][0]["boundary"] = "nowhere".into()).unwrap_err();
        assert_eq!(reference.exit_code(), 4);
        assert!(reference.to_string().starts_with("exposures.pay_invoice[0]"));
        let version = edit("payments", |v| v["schema_version"] = 9.into()).unwrap_err();
        assert_eq!(version.exit_code(), 5);
        let io = load_scenario(Path::new("/nonexistent/x.json")).unwrap_err();
        assert_eq!(io.exit_code(), 6);
    }

    #[test]
    fn hash_tracks_each_primitive() {
        let base = load_scenario(&bundled("payments")).unwrap().config_hash();
        let edits: [fn(&mut serde_json::Value); 5] = [
            |v| v["model"]["safe_defaults"][0]["default"] = "noop".into(),
            |v| v["continuation_policy"]["fallback"] = serde_json::json!(["draft_payment", "noop"]),
            |v| v["risk"]["gamma"] = 0.07.into(),
            |v| v["boundaries"][0]["potential"]["weights"][0] = 0.6.into(),
            |v| v["model"]["terminal_loss"]["lost"] = 90.0.into(),
        ];
        for (i, f) in edits.into_iter().enumerate() {
            let h = edit("payments", f).unwrap().config_hash();
            assert_ne!(h.combined, base.combined, "edit {i}");
        }
        let seed_only = edit("payments", |v| v["seed"] = 1.into()).unwrap().config_hash();
        assert_eq!(seed_only, base);
    }

    #[test]
    fn path_oracle_agrees_with_engine() {
        for name in ["payments", "database", "trading"] {
            let s = load_scenario(&bundled(name)).unwrap();
            let m = s.model();
            let mut priced = 0;
            for node in m.nodes() {
                for &a in m.actions(node).unwrap() {
                    let (x, y) = (s.true_toll(node, a).unwrap(), s.oracle_toll(node, a).unwrap());
                    assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{name} {node:?} {a:?}: {x} vs {y}");
                    priced += usize::from(x > 0.0);
                }
            }
            assert!(priced > 0, "{name} has no positive toll");
        }
    }
}
