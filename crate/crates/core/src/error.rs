use thiserror::Error;

/// Coarse failure class, used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Input,
    Numerical,
    Convergence,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::Input => 3,
            ErrorClass::Numerical => 4,
            ErrorClass::Convergence => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("region {index} has no neighbours (zero weight row)")]
    IsolatedRegion { index: usize },

    #[error("records {i} and {j} share no observed variable")]
    NoOverlap { i: usize, j: usize },

    #[error("(I - rho W) is near-singular: reciprocal condition {rcond:.3e}")]
    NearSingular { rcond: f64 },

    #[error("dense {what} of size {size} exceeds the materialization cap {cap}; use the matrix-free routines")]
    TooLarge { what: &'static str, size: usize, cap: usize },

    #[error("design matrix is rank deficient; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("covariance matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("optimizer failed from every starting point ({} starts)", traces.len())]
    NonConvergence { traces: Vec<Vec<Vec<f64>>> },

    #[error("{failed} of {total} runs failed")]
    RunFailures { failed: usize, total: usize },

    #[error("redundant anchors: cells {cells:?} make the constraint system rank deficient")]
    RedundantAnchor { cells: Vec<(usize, usize)> },

    #[error("anchors at period {time} sum to {anchored} but the aggregate is {total}")]
    InfeasibleAnchor { time: usize, anchored: f64, total: f64 },

    #[error("series {series} has fewer than two observations")]
    InsufficientData { series: String },

    #[error("column {column} has zero variance")]
    ZeroVariance { column: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("cannot open {path}: {source}")]
    Open { path: String, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Domain(_) => ErrorClass::Usage,
            Error::IsolatedRegion { .. }
            | Error::NoOverlap { .. }
            | Error::InsufficientData { .. }
            | Error::ZeroVariance { .. }
            | Error::DimensionMismatch(_)
            | Error::Parse(_)
            | Error::RedundantAnchor { .. }
            | Error::InfeasibleAnchor { .. }
            | Error::Open { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorClass::Input,
            Error::NearSingular { .. }
            | Error::TooLarge { .. }
            | Error::RankDeficient { .. }
            | Error::NotPositiveDefinite(_)
            | Error::UndefinedMetric(_) => ErrorClass::Numerical,
            Error::NonConvergence { .. } | Error::RunFailures { .. } => ErrorClass::Convergence,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
