use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric (max relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("Cholesky factorization failed for {n}x{n} matrix")]
    NotPositiveDefinite { n: usize },

    #[error("singular correlation matrix: points {0} and {1} coincide")]
    DuplicatePoints(usize, usize),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite sampler state at region {region}, time {time}, sweep {sweep}")]
    NonFiniteState {
        region: usize,
        time: usize,
        sweep: usize,
    },

    #[error("non-positive conditional variance {0:e}")]
    NonPositiveVariance(f64),

    #[error("undefined variance: degrees of freedom {nu} <= 2 in region {region}")]
    UndefinedVariance { region: usize, nu: f64 },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("likelihood decreased for {0} consecutive iterations beyond Monte Carlo error")]
    LikelihoodDecrease(usize),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
