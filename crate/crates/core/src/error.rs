use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("{element}: {message}")]
    Semantic { element: String, message: String },
    #[error("unsupported schema_version {0}")]
    UnsupportedSchema(u32),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("dead island {island}: no in-service generator on buses {buses:?}")]
    DeadIsland { island: usize, buses: Vec<u32> },
    #[error("degenerate island {island}: singular B′ after removing the reference")]
    DegenerateIsland { island: usize },
    #[error("no island can be solved")]
    NoSolvableIsland,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("slack infeasible: {unabsorbed_mw:.3} MW cannot be absorbed within generator limits")]
    SlackInfeasible { unabsorbed_mw: f64 },
    #[error("power flow did not converge")]
    NotConverged,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("state estimation diverged after {iterations} iterations (last max |Δx| = {last_step:e})")]
    Diverged { iterations: usize, last_step: f64, last_state: Vec<f64> },
    #[error("network is unobservable from the active measurements")]
    Unobservable,
    #[error("insufficient redundancy: {measurements} measurements for {states} states")]
    InsufficientRedundancy { measurements: usize, states: usize },
    #[error("bad data unresolvable: eliminating measurement {candidate} would lose observability")]
    BadDataUnresolvable { candidate: u32, eliminated: Vec<u32> },
    #[error("measurement {id}: {message}")]
    InvalidMeasurement { id: u32, message: String },
    #[error("telemetry file: {0}")]
    Format(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("LP is unbounded (entering column {column})")]
    Unbounded { column: usize },
    #[error("LP is infeasible (phase-one residual {residual:e})")]
    Infeasible { residual: f64 },
    #[error("simplex iteration limit {0} reached")]
    IterationLimit(usize),
    #[error("singular basis")]
    SingularBasis,
    #[error("malformed LP: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScedError {
    #[error("RTCA report references unknown branch {0}")]
    UnknownBranch(u32),
    #[error("base case power flow is not converged")]
    BaseNotConverged,
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("attack perturbs the reference angle of bus {0}")]
    TouchesReference(u32),
    #[error("attack implies an injection change at bus {0}, which has no load")]
    NonLoadInjection(u32),
    #[error("attack net load change {0:e} MW is not zero")]
    NetLoadChange(f64),
    #[error("attack footprint of {footprint} measurements exceeds budget {budget}")]
    OverBudget { footprint: usize, budget: usize },
    #[error("no feasible attack: {0}")]
    Infeasible(String),
    #[error("unknown target branch {0}")]
    UnknownTarget(u32),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("insufficient history: {rows} rows, need at least {needed}")]
    InsufficientHistory { rows: usize, needed: usize },
    #[error("dimension mismatch: expected {expected} loads, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("grouping is not calibrated")]
    NotCalibrated,
    #[error("history file: {0}")]
    Format(String),
}

/// Umbrella error for the pipeline and front ends.
#[derive(Debug, Error)]
pub enum EmsError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Sced(#[from] ScedError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("{0}")]
    Input(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
