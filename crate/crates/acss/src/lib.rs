//! Approximate co-sufficient sampling (aCSS) for hypothesis testing with
//! estimated nuisance parameters.
//!
//! The pipeline implemented here:
//!
//! 1. Fit a *perturbed* estimator: minimize `L(theta; X) + sigma * w' theta`
//!    where `L` is a (possibly penalized or trimmed) negative log-likelihood
//!    and `w ~ N(0, I_d / d)` is a fresh Gaussian perturbation
//!    ([`estimator::fit_penalized`], [`estimator::fit_mtle`]).
//! 2. Verify the fit is a strict sparse (or trimmed) second-order stationary
//!    point ([`estimator::check_ssosp_penalized`], [`estimator::check_ssosp_mtle`]).
//! 3. Sample exchangeable copies of the data from the conditional density
//!    given the perturbed estimate ([`density`], [`sampler`]), either in
//!    closed form (Gaussian models) or by importance sampling with explicit
//!    weights.
//! 4. Combine observed and copy statistics into a finite-sample valid
//!    weighted p-value ([`sampler::pval_weighted`]).
//!
//! The [`crt`] module specializes the machinery to conditional randomization
//! tests for Gaussian model-X regression, and [`bench`] is a deterministic
//! Monte Carlo harness over the two built-in simulation studies.
//!
//! Run `cargo run --example goodness_of_fit` (or any other example) for an
//! end-to-end tour; the `acss` binary in the companion crate drives [`bench`]
//! from a JSON config.

pub mod bench;
pub mod crt;
pub mod density;
pub mod estimator;
pub mod model;
pub mod penalty;
pub mod sampler;
pub mod seed;

mod linalg;

#[cfg(test)]
pub(crate) mod testutil;

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A data vector or matrix has a size incompatible with the model.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A parameter value lies outside the model's open parameter space.
    #[error("parameter outside domain: {0}")]
    Domain(String),
    /// Penalty curvature requested exactly at a kink of `rho'`.
    #[error("second derivative undefined at knot t = {t}")]
    AtKnot { t: f64 },
    /// An iterative solver exhausted its iteration budget.
    #[error("solver failed to converge within {max_iter} iterations (residual {residual:.3e})")]
    NoConvergence { max_iter: usize, residual: f64 },
    /// A matrix that must be invertible or positive definite is not.
    #[error("singular or indefinite matrix: {0}")]
    Singular(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
