use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("duplicate node name `{0}`")]
    DuplicateNode(String),
    #[error("node `{0}` has an empty or too small support")]
    EmptySupport(String),
    #[error("outcome node `{0}` must sit in the covariate block of a time point >= 1")]
    OutcomeOutsideBlock(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("row {row}: {violation}")]
    InvalidRow { row: usize, violation: String },
    #[error("invalid target: {0}")]
    Target(String),
    #[error("zero probability at row {row}, node `{node}`")]
    ZeroProbability { row: usize, node: String },
    #[error("fluctuation multiplier is not positive at node `{node}`")]
    NegativeMultiplier { node: String },
    #[error("fluctuation renormalization drift {drift:e} at node `{node}`")]
    Renormalization { node: String, drift: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("step size underflow after {iterations} iterations")]
    StepUnderflow { iterations: usize },
    #[error("inner fluctuation solver diverged at node `{node}`")]
    Divergence { node: String },
    #[error("lasso did not converge within {sweeps} sweeps")]
    LassoNoConvergence { sweeps: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
