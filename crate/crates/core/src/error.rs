use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    #[error("matrix is not skew-symmetric (max |M + Mᵀ| = {asym:e})")]
    NotSkew { asym: f64 },
    #[error("vector is not unit length (norm = {norm})")]
    NotUnit { norm: f64 },
    #[error("matrix is not a rotation (max |RᵀR − I| = {orth:e}, det = {det})")]
    NotRotation { orth: f64, det: f64 },
    #[error("rotation angle {angle} is within the branch tolerance of π")]
    LogBranch { angle: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("command does not match the system: {0}")]
    InvalidCommand(String),
    #[error("singular mass matrix (pivot ratio {ratio:e}); degenerate geometry")]
    SingularMassMatrix { ratio: f64 },
    #[error("time step {0} outside (0, 0.01] s")]
    InvalidStep(f64),
    #[error("non-finite value in integrated state: {dump}")]
    NonFinite { dump: String },
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinearizationError {
    #[error("state outside the hover chart: {0}")]
    ChartBoundary(String),
    #[error("finite-difference asymmetry {asym:e} exceeds {limit:e} (column {column})")]
    FiniteDifference { column: usize, asym: f64, limit: f64 },
    #[error("hover thrusts do not balance the system (residual {residual:e}); attachments must be centred on the payload")]
    NotEquilibrium { residual: f64 },
    #[error("matrix dimension mismatch: {0}")]
    Dimension(String),
    #[error("Riccati solver failed: {0}")]
    Riccati(String),
    #[error("malformed model text at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("quad {0} is the leader; follower control needs index ≥ 1")]
    LeaderIndex(usize),
    #[error("index {index} out of range for {n} quadcopters")]
    Index { index: usize, n: usize },
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error(transparent)]
    Linearization(#[from] LinearizationError),
}
