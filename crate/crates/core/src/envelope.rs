//! Conservative upper envelopes on positive tolls.
//!
//! The exact envelope tabulates the positive toll of every priced action. The
//! conformal envelope adds a split-conformal margin to a base predictor so
//! that, for exchangeable query points, the positive toll stays below the
//! envelope with probability at least `1 - delta`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{is_side_effect_bearing, ActionId, EnvironmentModel, Node, Policy, SafeDefaultMap};
use crate::risk::RiskSpec;
use crate::toll::counterfactual_toll;

/// Coverage comparisons allow this much rounding.
pub const COVER_TOL: f64 = 1e-12;

/// A priced action at a node, with the features a predictor sees.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPoint {
    pub node: Node,
    pub action: ActionId,
    pub features: Vec<f64>,
}

/// Maps `(node, action)` to the feature vector used by base predictors:
/// intercept, time, state component values, one-hot action category.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    categories: Vec<String>,
}

impl FeatureMap {
    pub fn new(model: &EnvironmentModel) -> Self {
        let cats: BTreeSet<String> =
            (0..model.num_actions()).map(|a| model.category(ActionId(a)).to_string()).collect();
        Self { categories: cats.into_iter().collect() }
    }

    pub fn features(&self, model: &EnvironmentModel, node: Node, action: ActionId) -> Vec<f64> {
        let mut f = vec![1.0, node.time as f64];
        f.extend(model.state_values(node.state).iter().map(|&v| v as f64));
        let cat = model.category(action);
        f.extend(self.categories.iter().map(|c| if c == cat { 1.0 } else { 0.0 }));
        f
    }

    /// Column names matching [`Self::features`].
    pub fn names(&self, model: &EnvironmentModel) -> Vec<String> {
        let mut n = vec!["intercept".to_string(), "time".to_string()];
        n.extend(model.components().iter().map(|c| c.name.clone()));
        n.extend(self.categories.iter().map(|c| format!("category:{c}")));
        n
    }

    pub fn query(&self, model: &EnvironmentModel, node: Node, action: ActionId) -> QueryPoint {
        QueryPoint { node, action, features: self.features(model, node, action) }
    }
}

pub trait Predictor: Send + Sync + fmt::Debug {
    fn predict(&self, q: &QueryPoint) -> f64;
}

/// Linear regression on the query features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub weights: Vec<f64>,
}

impl LinearPredictor {
    /// Minimum-norm least-squares fit.
    pub fn fit(points: &[(QueryPoint, f64)]) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::InvalidCalibration("no training points".into()))?;
        let d = first.0.features.len();
        if points.iter().any(|(q, _)| q.features.len() != d) {
            return Err(Error::InvalidCalibration("training features have mixed lengths".into()));
        }
        let x = DMatrix::from_fn(points.len(), d, |i, j| points[i].0.features[j]);
        let y = DVector::from_iterator(points.len(), points.iter().map(|(_, t)| *t));
        let w = x
            .svd(true, true)
            .solve(&y, 1e-10)
            .map_err(|e| Error::InvalidCalibration(format!("least squares failed: {e}")))?;
        Ok(Self { weights: w.iter().copied().collect() })
    }
}

impl Predictor for LinearPredictor {
    fn predict(&self, q: &QueryPoint) -> f64 {
        self.weights.iter().zip(&q.features).map(|(w, x)| w * x).sum()
    }
}

/// Multiplies another predictor's output; used to build biased-low fixtures.
#[derive(Debug, Clone)]
pub struct ScaledPredictor {
    pub inner: Arc<dyn Predictor>,
    pub factor: f64,
}

impl Predictor for ScaledPredictor {
    fn predict(&self, q: &QueryPoint) -> f64 {
        self.factor * self.inner.predict(q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeKind {
    Exact,
    Conformal,
}

/// Metadata written to run logs alongside every envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeMeta {
    pub kind: EnvelopeKind,
    pub inflation: f64,
    pub delta: f64,
    pub calibration_size: usize,
    pub quantile_rank: usize,
    /// Calibration and evaluation points must be exchangeable; not checked here.
    pub exchangeability: String,
}

#[derive(Debug, Clone)]
enum Source {
    Table(BTreeMap<(Node, ActionId), f64>),
    Predictor(Arc<dyn Predictor>),
}

#[derive(Debug, Clone)]
pub struct Envelope {
    source: Source,
    meta: EnvelopeMeta,
}

impl Envelope {
    pub fn meta(&self) -> &EnvelopeMeta {
        &self.meta
    }

    pub fn kind(&self) -> EnvelopeKind {
        self.meta.kind
    }

    pub fn inflation(&self) -> f64 {
        self.meta.inflation
    }

    /// Upper bound on the positive toll at `q`; never negative.
    pub fn query(&self, model: &EnvironmentModel, q: &QueryPoint) -> Result<f64> {
        match &self.source {
            Source::Table(t) => t.get(&(q.node, q.action)).copied().ok_or_else(|| Error::EnvelopeMiss {
                time: q.node.time,
                state: model.state_name(q.node.state).to_string(),
                action: model.action_name(q.action).to_string(),
            }),
            Source::Predictor(p) => Ok((p.predict(q) + self.meta.inflation).max(0.0)),
        }
    }

    /// Same predictor with the margin replaced; for miscalibration fixtures.
    pub fn with_inflation(&self, inflation: f64) -> Result<Self> {
        if self.meta.kind == EnvelopeKind::Exact {
            return Err(Error::InvalidCalibration("the exact envelope has no margin".into()));
        }
        if !(inflation >= 0.0) {
            return Err(Error::InvalidCalibration(format!("inflation {inflation} is negative")));
        }
        let mut out = self.clone();
        out.meta.inflation = inflation;
        Ok(out)
    }
}

/// Exact positive tolls of every side-effect-bearing action at every node.
pub fn exact_envelope(
    model: &EnvironmentModel,
    cont: &Policy,
    spec: &RiskSpec,
    sdm: &SafeDefaultMap,
) -> Result<Envelope> {
    let mut table = BTreeMap::new();
    for node in model.nodes() {
        for &a in model.actions(node)? {
            let toll = if is_side_effect_bearing(model, node, a)? {
                counterfactual_toll(model, node, a, cont, spec, sdm)?.positive_toll
            } else {
                0.0
            };
            table.insert((node, a), toll);
        }
    }
    Ok(Envelope {
        source: Source::Table(table),
        meta: EnvelopeMeta {
            kind: EnvelopeKind::Exact,
            inflation: 0.0,
            delta: 0.0,
            calibration_size: 0,
            quantile_rank: 0,
            exchangeability: "not required".into(),
        },
    })
}

/// Smallest calibration size for which the rank is at most `n`.
pub fn min_calibration_size(delta: f64) -> usize {
    ((1.0 / delta) - 1e-9).ceil() as usize - 1
}

/// `k = ceil((n + 1)(1 - delta))`, guarded against products like `9.000000000000002`.
pub fn conformal_rank(n: usize, delta: f64) -> Result<usize> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidCalibration(format!("delta {delta} is outside (0, 1)")));
    }
    let need = min_calibration_size(delta);
    if n < need {
        return Err(Error::InvalidCalibration(format!(
            "{n} calibration points at delta = {delta}; need at least {need}"
        )));
    }
    let k = (((n + 1) as f64) * (1.0 - delta) - 1e-9).ceil().max(1.0) as usize;
    if k > n {
        return Err(Error::InvalidCalibration(format!("rank {k} exceeds {n} points")));
    }
    Ok(k)
}

/// Split-conformal margin: the `k`-th smallest residual `true - predicted`,
/// clamped at zero.
pub fn fit_conformal_envelope(
    predictor: Arc<dyn Predictor>,
    calibration: &[(QueryPoint, f64)],
    delta: f64,
) -> Result<Envelope> {
    let n = calibration.len();
    let k = conformal_rank(n, delta)?;
    let mut residuals: Vec<f64> = calibration.iter().map(|(q, y)| y - predictor.predict(q)).collect();
    residuals.sort_by(f64::total_cmp);
    let inflation = residuals[k - 1].max(0.0);
    Ok(Envelope {
        source: Source::Predictor(predictor),
        meta: EnvelopeMeta {
            kind: EnvelopeKind::Conformal,
            inflation,
            delta,
            calibration_size: n,
            quantile_rank: k,
            exchangeability: "caller obligation, unchecked: frozen proposal policy".into(),
        },
    })
}

/// Fraction of test points whose true positive toll is at most the envelope.
pub fn coverage_estimate(env: &Envelope, model: &EnvironmentModel, test: &[(QueryPoint, f64)]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut covered = 0usize;
    for (q, y) in test {
        if *y <= env.query(model, q)? + COVER_TOL {
            covered += 1;
        }
    }
    Ok(covered as f64 / test.len() as f64)
}
