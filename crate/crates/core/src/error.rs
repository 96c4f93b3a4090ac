use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An iterative method failed to converge.
    #[error("numerical failure in {routine}: {detail}")]
    NumericalFailure {
        routine: &'static str,
        detail: String,
    },

    /// A recursion produced a non-finite value.
    #[error("divergence in {process} at path {path:?}, node {node}")]
    Divergence {
        process: &'static str,
        path: Option<usize>,
        node: usize,
    },

    /// The Gaussian limit has zero variance at the requested time.
    #[error("degenerate law: Var(Y) = {variance} at t = {time}")]
    DegenerateLaw { variance: f64, time: f64 },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
