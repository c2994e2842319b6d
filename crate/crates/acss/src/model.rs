//! Parametric model families: density, score, Hessian, forward sampling.
//!
//! Two concrete families cover everything the samplers and experiments need —
//! the Gaussian linear model `X | Z ~ N(Zθ, ν²I)` and the two-sample
//! Behrens–Fisher model with a common mean and per-group variances — plus a
//! callback-backed [`CustomModel`] for test oracles.
//!
//! Additive constants (the ½·log 2π terms) are kept in `neg_loglik` so that
//! log-densities are comparable across models and usable as importance-weight
//! numerators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

use crate::{linalg, Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// A parametric family {P_θ} with enough structure for perturbed maximum
/// likelihood and conditional-density evaluation.
///
/// `neg_loglik` is −log f(x; θ) including constants; `score` its θ-gradient;
/// `hessian` its θ-Hessian. All three reject parameters outside the open
/// domain with [`Error::Domain`].
pub trait Model: Send + Sync + std::any::Any {
    /// Concrete-type escape hatch; lets variant-specific code (observation
    /// trimming) recover the model family from a trait object.
    fn as_any(&self) -> &dyn std::any::Any;
    /// Parameter dimension d.
    fn dim(&self) -> usize;
    /// Observation dimension n.
    fn n_obs(&self) -> usize;
    /// Whether θ lies in the open parameter domain.
    fn in_domain(&self, theta: &DVector<f64>) -> bool;
    fn neg_loglik(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<f64>;
    fn score(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn hessian(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>>;
    /// One forward draw X ~ P_θ, deterministic given the generator state.
    fn sample_data(&self, theta: &DVector<f64>, rng: &mut dyn rand::RngCore) -> Result<DVector<f64>>;

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "theta has length {}, model has {} parameters",
                theta.len(),
                self.dim()
            )));
        }
        if !self.in_domain(theta) {
            return Err(Error::Domain(format!("theta = {:?}", theta.as_slice())));
        }
        Ok(())
    }

    fn check_data(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n_obs() {
            return Err(Error::Dimension(format!(
                "data has length {}, model expects {}",
                x.len(),
                self.n_obs()
            )));
        }
        Ok(())
    }
}

/// Gaussian linear model: X | Z ~ N(Zθ, ν²I) with fixed design Z.
#[derive(Debug, Clone)]
pub struct GaussianLinear {
    z: DMatrix<f64>,
    nu: f64,
}

impl GaussianLinear {
    pub fn new(z: DMatrix<f64>, nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::Domain(format!("noise sd nu = {nu} must be positive")));
        }
        if z.nrows() == 0 || z.ncols() == 0 {
            return Err(Error::Dimension("design matrix must be nonempty".into()));
        }
        Ok(Self { z, nu })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Residual x − Zθ.
    pub fn residual(&self, theta: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        x - &self.z * theta
    }
}

impl Model for GaussianLinear {
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn dim(&self) -> usize {
        self.z.ncols()
    }

    fn n_obs(&self) -> usize {
        self.z.nrows()
    }

    fn in_domain(&self, _theta: &DVector<f64>) -> bool {
        true
    }

    fn neg_loglik(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_data(x)?;
        let r = self.residual(theta, x);
        let n = self.n_obs() as f64;
        Ok(r.norm_squared() / (2.0 * self.nu * self.nu) + 0.5 * n * (LN_2PI + 2.0 * self.nu.ln()))
    }

    fn score(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        self.check_data(x)?;
        let r = self.residual(theta, x);
        Ok(self.z.transpose() * (-r) / (self.nu * self.nu))
    }

    fn hessian(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        self.check_data(x)?;
        Ok(self.z.transpose() * &self.z / (self.nu * self.nu))
    }

    fn sample_data(&self, theta: &DVector<f64>, rng: &mut dyn rand::RngCore) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let mean = &self.z * theta;
        let noise = linalg::standard_normal_vector(self.n_obs(), rng);
        Ok(mean + noise * self.nu)
    }
}

/// Two-sample Behrens–Fisher model under a common mean.
///
/// θ = (μ, γ⁰, γ¹) with γ⁰, γ¹ > 0. The first `n0` observations are
/// N(μ, γ⁰), the remaining `n1` are N(μ, γ¹); variances are parameterized
/// directly (γ is a variance, not a standard deviation).
#[derive(Debug, Clone, Copy)]
pub struct BehrensFisher {
    n0: usize,
    n1: usize,
}

impl BehrensFisher {
    pub fn new(n0: usize, n1: usize) -> Result<Self> {
        if n0 == 0 || n1 == 0 {
            return Err(Error::Dimension("both groups need at least one observation".into()));
        }
        Ok(Self { n0, n1 })
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    /// Group index sets (group 0 first, then group 1).
    pub fn group_indices(&self) -> (Vec<usize>, Vec<usize>) {
        ((0..self.n0).collect(), (self.n0..self.n0 + self.n1).collect())
    }

    /// Moment-based starting point for likelihood optimization: the pooled
    /// mean and per-group variances about it, floored away from zero.
    pub fn moment_start(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = (self.n0 + self.n1) as f64;
        let mu = x.sum() / n;
        let var = |range: std::ops::Range<usize>, len: usize| -> f64 {
            let s: f64 = range.map(|i| (x[i] - mu).powi(2)).sum();
            (s / len as f64).max(1e-6)
        };
        DVector::from_row_slice(&[mu, var(0..self.n0, self.n0), var(self.n0..self.n0 + self.n1, self.n1)])
    }
}

/// Per-group sufficient pieces used by the likelihood terms: one group's
/// contribution to the negative log likelihood and its derivatives.
fn bf_group_terms(xs: &[f64], mu: f64, gamma: f64) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let ss: f64 = xs.iter().map(|&v| (v - mu).powi(2)).sum();
    let sum_dev: f64 = xs.iter().map(|&v| v - mu).sum();
    let nll = ss / (2.0 * gamma) + 0.5 * n * (LN_2PI + gamma.ln());
    let d_mu = -sum_dev / gamma;
    let d_gamma = 0.5 * n / gamma - ss / (2.0 * gamma * gamma);
    (nll, d_mu, d_gamma)
}

impl Model for BehrensFisher {
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn dim(&self) -> usize {
        3
    }

    fn n_obs(&self) -> usize {
        self.n0 + self.n1
    }

    fn in_domain(&self, theta: &DVector<f64>) -> bool {
        theta.len() == 3 && theta[1] > 0.0 && theta[2] > 0.0 && theta.iter().all(|v| v.is_finite())
    }

    fn neg_loglik(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_data(x)?;
        let xs = x.as_slice();
        let (nll0, _, _) = bf_group_terms(&xs[..self.n0], theta[0], theta[1]);
        let (nll1, _, _) = bf_group_terms(&xs[self.n0..], theta[0], theta[2]);
        Ok(nll0 + nll1)
    }

    fn score(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        self.check_data(x)?;
        let xs = x.as_slice();
        let (_, dmu0, dg0) = bf_group_terms(&xs[..self.n0], theta[0], theta[1]);
        let (_, dmu1, dg1) = bf_group_terms(&xs[self.n0..], theta[0], theta[2]);
        Ok(DVector::from_row_slice(&[dmu0 + dmu1, dg0, dg1]))
    }

    fn hessian(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        self.check_data(x)?;
        let (mu, g0, g1) = (theta[0], theta[1], theta[2]);
        let xs = x.as_slice();
        let (n0, n1) = (self.n0 as f64, self.n1 as f64);
        let dev0: f64 = xs[..self.n0].iter().map(|&v| v - mu).sum();
        let dev1: f64 = xs[self.n0..].iter().map(|&v| v - mu).sum();
        let ss0: f64 = xs[..self.n0].iter().map(|&v| (v - mu).powi(2)).sum();
        let ss1: f64 = xs[self.n0..].iter().map(|&v| (v - mu).powi(2)).sum();
        let mut h = DMatrix::zeros(3, 3);
        h[(0, 0)] = n0 / g0 + n1 / g1;
        h[(0, 1)] = dev0 / (g0 * g0);
        h[(1, 0)] = h[(0, 1)];
        h[(0, 2)] = dev1 / (g1 * g1);
        h[(2, 0)] = h[(0, 2)];
        h[(1, 1)] = ss0 / (g0 * g0 * g0) - 0.5 * n0 / (g0 * g0);
        h[(2, 2)] = ss1 / (g1 * g1 * g1) - 0.5 * n1 / (g1 * g1);
        Ok(h)
    }

    fn sample_data(&self, theta: &DVector<f64>, rng: &mut dyn rand::RngCore) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let (mu, sd0, sd1) = (theta[0], theta[1].sqrt(), theta[2].sqrt());
        let mut out = DVector::zeros(self.n_obs());
        for i in 0..self.n0 {
            let z: f64 = rng.sample(StandardNormal);
            out[i] = mu + sd0 * z;
        }
        for i in self.n0..self.n_obs() {
            let z: f64 = rng.sample(StandardNormal);
            out[i] = mu + sd1 * z;
        }
        Ok(out)
    }
}

type DensityFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type SampleFn = Arc<dyn Fn(&DVector<f64>, &mut dyn rand::RngCore) -> DVector<f64> + Send + Sync>;
type DomainFn = Arc<dyn Fn(&DVector<f64>) -> bool + Send + Sync>;

/// Caller-supplied model, mainly for test oracles and synthetic validity
/// studies. Not reachable from the CLI.
#[derive(Clone)]
pub struct CustomModel {
    dim: usize,
    n_obs: usize,
    neg_loglik: DensityFn,
    score: VectorFn,
    hessian: MatrixFn,
    sample: SampleFn,
    in_domain: DomainFn,
}

impl CustomModel {
    pub fn new(
        dim: usize,
        n_obs: usize,
        neg_loglik: DensityFn,
        score: VectorFn,
        hessian: MatrixFn,
        sample: SampleFn,
        in_domain: DomainFn,
    ) -> Self {
        Self { dim, n_obs, neg_loglik, score, hessian, sample, in_domain }
    }
}

impl Model for CustomModel {
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn n_obs(&self) -> usize {
        self.n_obs
    }

    fn in_domain(&self, theta: &DVector<f64>) -> bool {
        (self.in_domain)(theta)
    }

    fn neg_loglik(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_data(x)?;
        Ok((self.neg_loglik)(theta, x))
    }

    fn score(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        self.check_data(x)?;
        Ok((self.score)(theta, x))
    }

    fn hessian(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        self.check_data(x)?;
        Ok((self.hessian)(theta, x))
    }

    fn sample_data(&self, theta: &DVector<f64>, rng: &mut dyn rand::RngCore) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        Ok((self.sample)(theta, rng))
    }
}
