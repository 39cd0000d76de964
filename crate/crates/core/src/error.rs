use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph is disconnected: node {0} unreachable from node 0")]
    Disconnected(usize),
    #[error("invalid edge ({0}, {1}) for a graph with {2} nodes")]
    InvalidEdge(usize, usize, usize),
    #[error("weight matrix does not match the graph sparsity pattern at ({0}, {1})")]
    PatternMismatch(usize, usize),
    #[error("parameter assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("missing tuning value `{0}`")]
    MissingTuning(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid initial state: {0}")]
    InvalidInit(String),
    #[error("round count must be at least 1")]
    NoRounds,
    #[error("certificate is required for this quantity")]
    CertificateMissing,
    #[error("not enough data points in the window [{0}, {1}]")]
    InsufficientData(usize, usize),
    #[error("oracle did not converge: {0}")]
    NotConverged(String),
    #[error("grid oracle is limited to a total dimension of 4, got {0}")]
    TooLarge(usize),
    #[error("grid oracle found no feasible point")]
    NoFeasiblePoint,
    #[error("malformed document: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
