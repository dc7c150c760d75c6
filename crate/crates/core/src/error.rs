use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid rank: requested {requested}, available {available}")]
    InvalidRank { requested: usize, available: usize },

    #[error("matrix is singular (pivot {pivot:e} at step {step})")]
    SingularMatrix { step: usize, pivot: f64 },

    #[error("no valid subdomain: every reference point is excluded")]
    NoValidSubdomain,

    #[error("degenerate interpolation basis at step {0}")]
    DegenerateBasis(usize),

    #[error("non-finite residual encountered")]
    NonFiniteResidual,

    #[error("iteration did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("singular Jacobian")]
    SingularJacobian,

    #[error("time segment [{lo}, {hi}] contains no snapshots")]
    EmptySegment { lo: f64, hi: f64 },

    #[error("no reduced model covers time {0}")]
    SegmentGap(f64),

    #[error("simulation diverged at t = {0}")]
    DivergedSimulation(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("snapshot store format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
