use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid stepsize: {0}")]
    InvalidStepsize(String),
    #[error("invalid sample schedule: {0}")]
    InvalidSchedule(String),
    #[error("block sizes {blocks:?} do not partition dimension {dim}")]
    BlockMismatch { blocks: Vec<usize>, dim: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid feasible set: {0}")]
    InvalidSet(String),
    #[error("affine constraints are inconsistent")]
    InfeasibleAffine,
    #[error("affine constraint matrix is rank deficient")]
    RankDeficientAffine,
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("no known solutions")]
    NoKnownSolutions,
    #[error("empty list")]
    EmptyList,
    #[error("oracle failure: {0}")]
    OracleFailure(String),
    #[error("problem has no closed-form mean operator")]
    NoMeanOperator,
    #[error("coordination mismatch: {0}")]
    CoordinationMismatch(String),
    #[error("trace lacks diagnostics needed for this audit: {0}")]
    MissingDiagnostics(String),
    #[error("invalid horizon: {0}")]
    InvalidHorizon(String),
    #[error("invalid inputs: {0}")]
    InvalidInputs(String),
    #[error("J is required but neither an empirical table nor a value was supplied")]
    MissingJ,
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
