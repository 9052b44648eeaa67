use thiserror::Error;

/// Errors surfaced by problem construction, sweeps, and solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("problem definition rejected: {0}")]
    InvalidProblem(String),

    #[error("state left the finite range at node {node} (t = {t:.6})")]
    IntegrationDiverged { node: usize, t: f64 },

    #[error("non-finite value from {context} at t = {t:.6}")]
    NonFiniteEval { context: &'static str, t: f64 },

    #[error("grid mismatch in {context}: {lhs} nodes vs {rhs} nodes")]
    GridMismatch {
        context: &'static str,
        lhs: usize,
        rhs: usize,
    },

    #[error("decision maker {dm} has an empty basis")]
    EmptyBasis { dm: usize },

    #[error("control-weight block for decision maker {dm} is singular at node {node}")]
    SingularBlock { dm: usize, node: usize },

    #[error(
        "fixed-point iteration diverging after {iterations} iterations (gap {gap:.3e}); \
         retry with smaller damping"
    )]
    FixedPointDiverged { iterations: usize, gap: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
