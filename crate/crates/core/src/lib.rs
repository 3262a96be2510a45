//! Recovery of a low-rank positive-semidefinite matrix `M = X X^T` from
//! random rank-one quadratic measurements `y_i = ||a_i^T X||^2`, by spectral
//! initialization followed by vanilla gradient descent.
//!
//! The crate is organized around the pipeline:
//!
//! - [`kernels`]: dense symmetric eigenpairs and small SVDs.
//! - [`model`]: planted ground truths, Gaussian sensing ensembles, exact
//!   measurements, the streaming covariance sketch, and a flat binary
//!   save/load format.
//! - [`objective`]: the quartic empirical risk, its gradient, the Hessian
//!   quadratic form, and leave-one-out variants, all in `O(mnr)` per
//!   evaluation.
//! - [`alignment`]: orthogonal Procrustes alignment, the recovery-distance
//!   metric, the incoherence statistic, and contraction-region membership.
//! - [`solver`]: spectral initialization, step-size rules, the gradient loop
//!   with full instrumentation, and leave-one-out trajectories.
//! - [`experiments`]: the reproducible experiment harness behind the CLI.
//! - [`oracles`]: slow, independent reference routines for verification.

// `!(x > 0.0)` is the intended way to reject NaN along with nonpositive
// values in precondition checks; the suggested `x <= 0.0` would let NaN pass.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod model;
pub mod objective;
pub mod oracles;
pub mod solver;

pub use error::{Error, Result};
