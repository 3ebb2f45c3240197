use thiserror::Error;

/// Errors raised by model construction, evaluation, ledgers and the gate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("state '{state}' has {got} component values, expected {expected}")]
    ComponentArity { state: String, expected: usize, got: usize },
    #[error("duplicate state id '{0}'")]
    DuplicateState(String),
    #[error("unknown state '{0}'")]
    UnknownState(String),
    #[error("unknown action '{0}'")]
    UnknownAction(String),
    #[error("duplicate node ({time}, {state})")]
    DuplicateNode { time: usize, state: String },
    #[error("node ({time}, {state}) lies at or beyond the horizon")]
    NodeBeyondHorizon { time: usize, state: String },
    #[error("node ({time}, {state}) has an empty action set")]
    EmptyActionSet { time: usize, state: String },
    #[error("node ({time}, {state}) lacks the no-op action '{noop}'")]
    MissingNoop { time: usize, state: String, noop: String },
    #[error("action '{action}' listed twice at node ({time}, {state})")]
    DuplicateAction { time: usize, state: String, action: String },
    #[error("kernel row ({time}, {state}, {action}) sums to {sum}, expected 1")]
    KernelRowSum { time: usize, state: String, action: String, sum: f64 },
    #[error("kernel row ({time}, {state}, {action}) has an invalid probability {prob}")]
    InvalidProbability { time: usize, state: String, action: String, prob: f64 },
    #[error("kernel row ({time}, {state}, {action}) targets '{target}', which is not a node at time {next_time}")]
    DanglingTarget { time: usize, state: String, action: String, target: String, next_time: usize },
    #[error("terminal state '{0}' has no terminal loss")]
    MissingTerminalLoss(String),
    #[error("terminal loss of '{state}' is {loss}; losses must be finite and nonnegative")]
    InvalidLoss { state: String, loss: f64 },
    #[error("initial state '{0}' is not a node at time 0")]
    MissingRoot(String),
    #[error("safe default '{default}' for '{action}' is not available at ({time}, {state})")]
    SafeDefaultUnavailable { time: usize, state: String, action: String, default: String },
    #[error("safe default map is not idempotent: '{default}' maps to '{image}'")]
    SafeDefaultNotIdempotent { default: String, image: String },
    #[error("no safe default fixed for priced action '{action}' at ({time}, {state}); every side-effect-bearing action needs an ex ante safe default")]
    MissingSafeDefault { time: usize, state: String, action: String },
    #[error("no node ({time}, {state}) exists in the model")]
    UnknownNode { time: usize, state: String },
    #[error("action '{action}' is not available at ({time}, {state})")]
    ActionUnavailable { time: usize, state: String, action: String },
    #[error("policy undefined at reachable node ({time}, {state})")]
    PolicyUndefined { time: usize, state: String },
    #[error("policy row at ({time}, {state}) is invalid: {reason}")]
    InvalidPolicyRow { time: usize, state: String, reason: String },
    #[error("invalid risk spec: {0}")]
    InvalidRiskSpec(String),
    #[error("ambiguity set is empty")]
    EmptyAmbiguitySet,
    #[error("ambiguity set models do not share a skeleton: {0}")]
    SkeletonMismatch(String),
    #[error("action set is empty")]
    EmptyActionSetArgument,
    #[error("invalid witness: {0}")]
    InvalidWitness(String),
    #[error("invalid enumeration budget: {0}")]
    InvalidBudget(String),
    #[error("enumeration budget exceeded: {what} exceeds {limit}")]
    BudgetExceeded { what: &'static str, limit: usize },
    #[error("invalid potential: {0}")]
    InvalidPotential(String),
    #[error("invalid boundary: {0}")]
    InvalidBoundary(String),
    #[error("unknown boundary '{0}'")]
    UnknownBoundary(String),
    #[error("exposure increment component {index} is {value}; increments must be nonnegative")]
    NegativeIncrement { index: usize, value: f64 },
    #[error("increment has dimension {got}, boundary expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("version conflict on boundary '{boundary}': expected {expected}, found {found}")]
    VersionConflict { boundary: String, expected: u64, found: u64 },
    #[error("partition {index} sums to {sum:?}, expected {total:?}")]
    PartitionSum { index: usize, sum: Vec<f64>, total: Vec<f64> },
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("envelope has no value for ({time}, {state}, {action})")]
    EnvelopeMiss { time: usize, state: String, action: String },
    #[error("invalid gate configuration: {0}")]
    InvalidGateConfig(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("audit mismatch: {0}")]
    AuditMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
