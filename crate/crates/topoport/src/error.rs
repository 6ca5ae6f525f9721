//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("self-loop: adjacency[{0}][{0}] is set but self-loops are forbidden")]
    SelfLoop(usize),

    #[error("mask violation: edge ({0},{1}) is present but not permitted by the feasibility mask")]
    MaskViolation(usize, usize),

    #[error("measure not normalized: entries sum to {0}, expected 1")]
    MeasureNotNormalized(f64),

    #[error("negative measure entry at index {0}")]
    NegativeMeasure(usize),

    #[error("adjacency entry ({0},{1}) is not binary")]
    NonBinaryAdjacency(usize, usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("feasibility mask permits no edges")]
    EmptyMask,

    #[error("weight out of [0,1] at ({0},{1}): {2}")]
    WeightOutOfRange(usize, usize, f64),

    #[error("coupling marginal mismatch: {side} marginal deviates by {deviation:.3e}")]
    MarginalMismatch { side: &'static str, deviation: f64 },

    #[error("marginal has zero mass at {side} index {index} but the coupling places mass there")]
    ZeroMassSupport { side: &'static str, index: usize },

    #[error("invalid config value for `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },

    #[error("non-finite score on feasible edge ({0},{1})")]
    NonFiniteScore(usize, usize),

    #[error("feasibility masks differ between the two distributions")]
    MaskMismatch,

    #[error("residual is nonzero on a masked entry ({0},{1})")]
    ResidualOnMasked(usize, usize),

    #[error("oracle returned loss {0} outside [0,1]")]
    OracleContract(f64),

    #[error("support set is empty")]
    EmptySupport,

    #[error("prior bank is empty")]
    EmptyBank,

    #[error("training diverged: non-finite loss at step {0}")]
    Divergence(usize),

    #[error("stage {stage} failed: {source}")]
    StageFailed {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed accuracy matrix: {0}")]
    MalformedMatrix(String),

    #[error("config file {path}: {reason}")]
    ConfigFile { path: String, reason: String },

    #[error("unknown sweep key `{0}` (expected rho, lambda_kl, or lambda_r)")]
    UnknownSweepKey(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn config(key: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key,
            reason: reason.into(),
        }
    }
}
