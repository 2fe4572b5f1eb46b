//! Crate-wide error type.

/// Errors produced by mesh construction, assembly, solvers and the
/// experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter violates a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Mesh construction or validation failed.
    #[error("mesh error: {0}")]
    Mesh(String),

    /// A vector length does not match the number of degrees of freedom.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    /// A dense-path operation was requested above the dense size cap.
    #[error("dense cap exceeded: {n} DoFs > cap {cap}")]
    DenseCap { n: usize, cap: usize },

    /// An iterative solver ran out of iterations.
    #[error("{what} did not converge within {iters} iterations")]
    NoConvergence { what: &'static str, iters: usize },

    /// A matrix that must be invertible is numerically singular.
    #[error("singular matrix in {0}")]
    Singular(&'static str),

    /// Experiment configuration is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
