//! Constrained state estimation for linear causal descriptor systems.
//!
//! Models of the form
//!
//! ```text
//!     E x_{k+1} = A x_k + B u_k + w_k        (dynamics,    E, A: n1 x n)
//!       y_{k+1} = H x_{k+1} + v_{k+1}        (measurement, H: m x n)
//! ```
//!
//! with `w ~ N(0, Q)`, `v ~ N(0, R)` and polyhedral stage constraints
//! `E_c x_{k+1} <= A_c x_k + d_c`. `E` need not be square or invertible;
//! the estimators only require
//!
//! 1. `[E A]` full row rank,
//! 2. `[E; H]` full column rank,
//! 3. causality (index at most one).
//!
//! The crate provides three estimators over this model class:
//!
//! * [`estimators::fie_solve`] / [`estimators::fie_run`]: full-information
//!   estimation, one quadratic program over the entire horizon.
//! * [`estimators::mhe_run`]: classical fixed-window moving-horizon
//!   estimation with a filter-based arrival cost.
//! * [`estimators::mwmhe_run`]: multiple-window moving-horizon estimation,
//!   which keeps constrained windows alive only where constraints were
//!   recently active and bridges the unconstrained gaps with closed-form
//!   smoothing terms, trading a little bookkeeping for a much smaller QP.
//!
//! Supporting layers: [`dkf`] (descriptor Kalman filter, smoother gains,
//! steady-state covariances, coupling-norm horizon selection), [`qp`]
//! (block-tridiagonal interior-point solver with active-set polish), and
//! [`model`] (system description, validation, simulation).
//!
//! Weighted norms follow the estimation convention throughout:
//! `||z||^2_P = z' P^{-1} z` (the weight is a covariance, not a metric).

pub mod dkf;
pub mod estimators;
pub mod linalg;
pub mod model;
pub mod qp;

pub use model::{ConstraintSet, DescriptorSystem, Prior};

/// Errors reported by model validation, the filter layer, and the solvers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix dimensions are inconsistent with the declared sizes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A structural assumption on the system matrices fails.
    #[error("assumption violated: {0}")]
    Assumption(String),
    /// A matrix required to be symmetric positive definite is not.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),
    /// Fixed-point iteration failed to converge.
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    /// The quadratic program is primal infeasible (or numerically so).
    #[error("infeasible problem: {0}")]
    Infeasible(String),
    /// Input data is malformed (bad JSON, wrong lengths, bad values).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Reading or writing a file failed.
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
