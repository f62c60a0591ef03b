use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("matrix is not positive definite: pivot {pivot} has value {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite function value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },

    #[error("non-finite values in {0}")]
    Diverged(String),

    #[error("matrix H has rank {rank}, expected full column rank {expected}")]
    RankDeficient { rank: usize, expected: usize },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at byte {offset} in field `{field}`: {message}")]
    Parse {
        offset: usize,
        field: String,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(
        "power bisection bracket not found after 200 doublings (power at mu=0: {power_at_zero:e})"
    )]
    BisectionBracket { power_at_zero: f64 },

    #[error("unsupported primitive in differentiated objective: {0}")]
    UnsupportedPrimitive(String),

    #[error("no frozen precoder supplied for batch sample {sample}")]
    MissingPrecoder { sample: usize },

    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("penalty weight reached {kappa} (cap {cap}) with test penalty {penalty} still above threshold")]
    KappaCap { kappa: f64, cap: f64, penalty: f64 },

    #[error("no model registered for weights {key}; available: [{available}]")]
    MissingModel { key: String, available: String },
}

impl Error {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
