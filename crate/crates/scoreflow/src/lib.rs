//! Deterministic particle solver for stochastic optimal control problems,
//! built around a score-based fluctuation system integrated with forward
//! Euler. Alongside each particle position `z` the solver transports the
//! log-density `l`, the density `lt`, the score `s = grad log rho`, and the
//! score Jacobian `h`, using only spatial derivatives of the velocity field
//! evaluated at the step start:
//!
//! ```text
//! z'  =  f
//! l'  = -div f
//! lt' = -(div f) lt
//! s'  = -(grad f)^T s - grad(div f)
//! h'  = -sum_i s_i hess(f_i) - hess(div f) - h (grad f) - (grad f)^T h
//! ```
//!
//! Velocity fields are either one-hidden-layer networks in time and space or
//! per-step quadratic potentials; both expose exact closed-form spatial
//! derivatives and a taped (differentiable) batched rollout for training.
//!
//! Module map:
//!
//! - [`tensor`]: dense row-major `f64` tensors and the few matrix kernels
//!   (matmul, solve, Cholesky) everything else builds on.
//! - [`tape`]: reverse-mode autodiff over a fixed op vocabulary.
//! - [`velocity`]: velocity-field parameterizations with exact spatial
//!   derivatives, plus their taped batched evaluation.
//! - [`dynamics`]: the coupled transport system, Euler rollouts, and a
//!   sensitivity-based score reconstruction used as an independent check.
//! - [`problems`]: the control-problem catalog (costs, drifts, Gaussian
//!   initializations) with closed-form reference solutions where known.
//! - [`training`]: taped loss assembly (control cost + residual penalty)
//!   and Adam training loops, including the multi-stage variant.
//! - [`oracle`]: quadrature- and Monte-Carlo-based references independent of
//!   the solver (terminal densities, optimal costs, covariance flows).
//! - [`metrics`]: error measures against analytic or quadrature references.
//! - [`checks`]: derivative, score-reconstruction, and identity checks
//!   shared by the CLI and the acceptance tests.
//! - [`checkpoint`]: versioned JSON snapshots of parameters and optimizer
//!   state with exact round-tripping.
//! - [`report`]: run artifacts (cost curves, error summaries, trajectories).

pub mod checkpoint;
pub mod checks;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod problems;
pub mod report;
pub mod tape;
pub mod training;
pub mod tensor;
pub mod velocity;

pub use error::{Error, Result};
pub use tensor::Tensor;
