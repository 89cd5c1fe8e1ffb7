use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mode {mode} out of range for an order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("rank {rank} out of range for mode {mode} of size {size}")]
    RankOutOfRange { mode: usize, rank: usize, size: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank-deficient covariance: eigenvalue {eigenvalue:e} below threshold {threshold:e} (index {index})")]
    RankDeficient {
        index: usize,
        eigenvalue: f64,
        threshold: f64,
    },

    #[error("ill-conditioned matrix: {0}")]
    Conditioning(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("observation mask is empty")]
    EmptyMask,

    #[error("problem carries no ground truth")]
    MissingGroundTruth,

    #[error("non-finite iterate at iteration {iteration} ({stage}): {detail}")]
    Diverged {
        iteration: usize,
        stage: String,
        detail: String,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical kind (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::RankDeficient { .. }
                | Error::Conditioning(_)
                | Error::Numeric(_)
                | Error::Diverged { .. }
        )
    }
}
