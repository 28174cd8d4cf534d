use thiserror::Error;

/// Errors raised by tableau construction, stepping and the α search.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Evaluation outside the domain of the Hamiltonian (e.g. Kepler at the origin).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("stage solver did not converge after {iterations} iterations (residual {residual:e})")]
    StageNotConverged { iterations: usize, residual: f64 },

    /// g(α) keeps its sign over the whole scanned interval.
    #[error("no sign change of g found in [-{bracket_max:e}, {bracket_max:e}] at h = {h:e}")]
    NoRoot { h: f64, bracket_max: f64 },

    #[error("α search exhausted {g_evals} evaluations (|g| = {residual:e})")]
    AlphaNotConverged { g_evals: usize, residual: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Failure inside a multi-step run, with the step context attached.
    #[error("step {step} at t = {t}: {source}")]
    AtStep {
        step: usize,
        t: f64,
        state: Vec<f64>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::InvalidArgument(_) => false,
            Error::AtStep { source, .. } => source.is_numerical(),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
