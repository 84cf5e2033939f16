use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive semidefinite: pivot {pivot} is {value:e} after jitter {jitter:e}")]
    NotPositiveSemidefinite { pivot: usize, value: f64, jitter: f64 },

    #[error("degenerate conditioning: {0}")]
    Degenerate(String),

    #[error("numerical degeneracy in sample {sample}, coordinate {index}: {detail}")]
    Numerical {
        sample: usize,
        index: usize,
        detail: String,
    },

    #[error("invalid parameterization: {0}")]
    Parameterization(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
