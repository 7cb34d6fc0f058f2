use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed weight file: {0}")]
    Malformed(String),

    #[error("unsupported activation `{0}` (only `relu` is supported)")]
    UnsupportedActivation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The solver gave up without a usable point (numerical trouble, iteration limit).
    #[error("QP solver failed with status {0}")]
    Solver(String),

    /// The soft-constrained program is feasible by construction, so a certificate of
    /// infeasibility always means the assembly is wrong.
    #[error("QP reported infeasible ({0}); the soft-constrained program should always be feasible")]
    Infeasible(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("iLQR diverged at iteration {iteration} (cost trace {trace:?})")]
    Divergence { iteration: usize, trace: Vec<f64> },

    #[error("every filter iteration failed: {0}")]
    AllIterationsFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
