use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("field evaluated outside its domain ({0} is not finite)")]
    Domain(&'static str),
    #[error("arity mismatch: field takes {expected} arguments, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian in Legendre inversion (smallest singular value {0:e})")]
    SingularJacobian(f64),
    #[error("singular velocity Hessian: the direct Euler-Lagrange oracle needs a regular Lagrangian")]
    SingularHessian,
    #[error("point is not on the primary constraint set (residual {0:e})")]
    NotOnW1(f64),
    #[error("point is not on the constraint set (residual {0:e})")]
    NotOnConstraintSet(f64),
    #[error("constraint kernel dimension varies across sample points ({0:?}); refusing to freeze null directions")]
    RankJump(Vec<usize>),
    #[error("constraint chain needs differentiation depth {needed}, the scalar tower provides {available}")]
    DepthExceeded { needed: usize, available: usize },
    #[error("projection onto the constraint set failed: {0}")]
    ProjectionFailed(String),
    #[error("vector field undetermined: {0} free coefficient(s) and no rule to fix them")]
    VectorFieldUndetermined(usize),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
