//! Crate-wide error type.

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tensor/tape operations, rollouts, and problem setup.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or tape operation received incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// `Tape::backward` was asked to differentiate a non-scalar node.
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// A rollout or loss evaluation produced NaN/Inf.
    #[error("non-finite value in {context} (step {step}, particle {particle})")]
    NonFinite {
        context: &'static str,
        step: usize,
        particle: usize,
    },

    /// A training iteration produced a non-finite loss.
    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: usize, detail: String },

    /// A time-indexed field was evaluated off its grid.
    #[error("time {t} is not on the discrete grid (start {start}, dt {dt}, {n} intervals)")]
    OffGridTime { t: f64, start: f64, dt: f64, n: usize },

    /// The per-step Jacobian of the sensitivity oracle is (near-)singular.
    #[error("near-singular step Jacobian at step {step}: |dt * jac| = {norm:.3e} >= 1; reduce dt")]
    SingularStepJacobian { step: usize, norm: f64 },

    /// A problem constructor was given an unsupported dimension or parameter.
    #[error("invalid problem setup: {0}")]
    InvalidProblem(String),

    /// Invalid training or quadrature configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A grid interpolation was queried outside its bounds.
    #[error("query {point:?} outside grid bounds [{lo}, {hi}]; refusing to extrapolate")]
    OutOfBounds { point: Vec<f64>, lo: f64, hi: f64 },

    /// A linear solve met a singular matrix.
    #[error("singular matrix in {context}")]
    SingularMatrix { context: &'static str },

    /// Checkpoint (de)serialization failed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Filesystem error while writing run artifacts.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Shorthand for [`Error::ShapeMismatch`].
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}
