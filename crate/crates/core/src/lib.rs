//! Per-action actuarial runtime for autonomous agents.
//!
//! Side-effect-bearing actions are priced by a counterfactual risk toll
//! against a contractually fixed safe default, under a time-consistent
//! dynamic risk measure. Exposure inside an underwriting boundary is charged
//! through a monotone potential, irreversible authority carries a robust
//! premium, and a budget gate admits actions only while a conservative toll
//! envelope fits the remaining budget.
//!
//! Every quantity is computed exactly on finite-horizon tabular models; the
//! [`oracle`] module re-derives the same quantities by brute force.

// `!(x >= 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundary;
pub mod envelope;
pub mod error;
pub mod gate;
pub mod instances;
pub mod mdp;
pub mod oracle;
pub mod random;
pub mod risk;
pub mod toll;

pub use error::{Error, Result};
pub use mdp::{
    build_model, ActionId, EnvironmentModel, Intervention, ModelSpec, Node, Policy, SafeDefaultMap,
    StateId,
};
pub use risk::RiskSpec;
