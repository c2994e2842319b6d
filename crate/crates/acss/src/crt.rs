//! Conditional randomization tests for Gaussian model-X regression.
//!
//! The setting: a response `Y`, a candidate feature `X`, and covariates `Z`,
//! with `X | Z ~ N(Z theta, nu^2 I)` for an unknown `theta`. The null is
//! conditional independence, `Y ⊥ X | Z`. Copies of `X` drawn from (an
//! approximation of) its conditional law given `(Y, Z)`-measurable quantities
//! are exchangeable with the observed `X` under the null, so comparing a
//! statistic across copies yields a finite-sample p-value.
//!
//! Three copy mechanisms are implemented, all Gaussian with a shared spectral
//! representation ([`CopyLaw`]):
//!
//! * [`css_copies`]: exact co-sufficient sampling. Copies keep `Z*'X`
//!   fixed and resample the orthogonal complement, so no estimator is
//!   involved. Unlabeled rows (no response) may augment the design.
//! * [`acss_crt_copies_ols`]: copies conditioned on a perturbed least-squares
//!   estimate; the conditional law is Gaussian with precision
//!   `I + (d/sigma^2) Z* Z*'`.
//! * [`acss_crt_copies_gaussian`]: noise augmentation. The estimator sees
//!   `X + sigma U` and the copies are drawn from the posterior-style blend of
//!   the fitted means and the noisy observation. Any estimator of `theta`
//!   may be plugged in, which is what makes sparse high-dimensional fits
//!   usable here.
//!
//! Because every mechanism is Gaussian and the distilled statistic
//! ([`distilled_statistic`]) is linear in the copy, the copy distribution of
//! the statistic is an explicit normal: [`resampling_free_pvalue`] skips
//! Monte Carlo entirely. [`run_crt`] wires these pieces together, and
//! [`debiased_lasso_pvalue`] provides a classical asymptotic baseline.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::estimator::{
    draw_perturbation, fit_iht, fit_ols_perturbed, fit_penalized, Perturbation, SolverOptions,
};
use crate::linalg;
use crate::model::GaussianLinear;
use crate::penalty::Penalty;
use crate::sampler::pval_unweighted;
use crate::{Error, Result};

/// A conditional-independence testing problem: does `X` carry information
/// about `Y` beyond what `Z` explains?
///
/// The model for the feature is `X | Z ~ N(Z theta, nu^2 I)`. Optional
/// unlabeled rows `(x_unlabeled, z_unlabeled)` have no response but sharpen
/// anything that only involves the feature model.
#[derive(Debug, Clone)]
pub struct CrtProblem {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DMatrix<f64>,
    pub x_unlabeled: Option<DVector<f64>>,
    pub z_unlabeled: Option<DMatrix<f64>>,
    pub nu: f64,
}

impl CrtProblem {
    pub fn new(x: DVector<f64>, y: DVector<f64>, z: DMatrix<f64>, nu: f64) -> Result<Self> {
        let p = Self { x, y, z, x_unlabeled: None, z_unlabeled: None, nu };
        p.validate()?;
        Ok(p)
    }

    /// Attach unlabeled feature rows (observations of `(X, Z)` without `Y`).
    pub fn with_unlabeled(mut self, x_u: DVector<f64>, z_u: DMatrix<f64>) -> Result<Self> {
        self.x_unlabeled = Some(x_u);
        self.z_unlabeled = Some(z_u);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::Domain(format!("noise sd nu = {} must be positive", self.nu)));
        }
        if self.x.len() != self.z.nrows() || self.y.len() != self.z.nrows() {
            return Err(Error::Dimension("x, y, and z must have matching row counts".into()));
        }
        if self.z.nrows() == 0 || self.z.ncols() == 0 {
            return Err(Error::Dimension("design matrix must be nonempty".into()));
        }
        match (&self.x_unlabeled, &self.z_unlabeled) {
            (None, None) => {}
            (Some(xu), Some(zu)) => {
                if xu.len() != zu.nrows() || zu.ncols() != self.z.ncols() {
                    return Err(Error::Dimension(
                        "unlabeled rows must match the labeled design's width".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::Dimension(
                    "unlabeled x and z must be provided together".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of labeled rows.
    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    /// Number of covariates.
    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    /// Total rows including unlabeled augmentation.
    pub fn n_star(&self) -> usize {
        self.n() + self.x_unlabeled.as_ref().map_or(0, |v| v.len())
    }

    /// Stacked feature vector and design (labeled rows first).
    pub fn stacked(&self) -> (DVector<f64>, DMatrix<f64>) {
        match (&self.x_unlabeled, &self.z_unlabeled) {
            (Some(xu), Some(zu)) => {
                let mut x = DVector::zeros(self.n_star());
                x.rows_mut(0, self.n()).copy_from(&self.x);
                x.rows_mut(self.n(), xu.len()).copy_from(xu);
                let mut z = DMatrix::zeros(self.n_star(), self.d());
                z.rows_mut(0, self.n()).copy_from(&self.z);
                z.rows_mut(self.n(), zu.nrows()).copy_from(zu);
                (x, z)
            }
            _ => (self.x.clone(), self.z.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Copy laws.
// ---------------------------------------------------------------------------

/// A Gaussian copy law `N(mean, base_var * (I - U diag(shrink) U'))` over the
/// stacked feature vector.
///
/// The three mechanisms differ only in the spectral shrinkage:
/// co-sufficient sampling shrinks the whole column space of the design to
/// zero variance (`shrink = 1`), the least-squares mechanism shrinks each
/// singular direction partially, and the noise-augmentation mechanism is
/// isotropic (no spectral part at all).
#[derive(Debug, Clone)]
pub struct CopyLaw {
    pub mean: DVector<f64>,
    pub base_var: f64,
    /// Orthonormal columns spanning the shrunk directions (may be empty).
    pub u: DMatrix<f64>,
    /// Variance shrinkage per column of `u`, each in [0, 1].
    pub shrink: DVector<f64>,
}

impl CopyLaw {
    /// Dimension of one copy.
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.len() == 0
    }

    /// Draw one copy. Uses the square root
    /// `mean + sd * (eps - U diag(1 - sqrt(1 - shrink)) U' eps)`.
    pub fn sample(&self, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        let eps = linalg::standard_normal_vector(self.len(), rng);
        let sd = self.base_var.sqrt();
        if self.u.ncols() == 0 {
            return &self.mean + eps * sd;
        }
        let proj = self.u.transpose() * &eps;
        let scaled = DVector::from_fn(proj.len(), |i, _| {
            proj[i] * (1.0 - (1.0 - self.shrink[i]).max(0.0).sqrt())
        });
        &self.mean + (eps - &self.u * scaled) * sd
    }

    /// Mean and variance of the linear statistic `v' X_copy`.
    pub fn linear_moments(&self, v: &DVector<f64>) -> (f64, f64) {
        let mean = self.mean.dot(v);
        let mut var = v.norm_squared();
        if self.u.ncols() > 0 {
            let proj = self.u.transpose() * v;
            for i in 0..proj.len() {
                var -= self.shrink[i] * proj[i] * proj[i];
            }
        }
        (mean, self.base_var * var.max(0.0))
    }

    /// Dense covariance matrix (test and diagnostic use; O(n^2) memory).
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut cov = DMatrix::identity(n, n);
        if self.u.ncols() > 0 {
            cov -= &self.u * DMatrix::from_diagonal(&self.shrink) * self.u.transpose();
        }
        cov * self.base_var
    }
}

/// Thin SVD of the design with near-zero singular values dropped.
fn design_svd(z: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let svd = z.clone().svd(true, false);
    let u_full = svd.u.ok_or_else(|| Error::Singular("SVD failed on the design".into()))?;
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_sv * 1e-12;
    let mut cols = Vec::new();
    let mut values = Vec::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            cols.push(u_full.column(i).into_owned());
            values.push(s);
        }
    }
    let u = DMatrix::from_columns(&cols);
    Ok((u, values))
}

/// Exact co-sufficient copy law: `Z*'X` is held fixed, so the copies are
/// `P X* + nu (I - P) eps` with `P` the projection onto the design's column
/// space.
pub fn css_law(problem: &CrtProblem) -> Result<CopyLaw> {
    let (x_star, z_star) = problem.stacked();
    let (u, values) = design_svd(&z_star)?;
    let mean = &u * (u.transpose() * &x_star);
    let shrink = DVector::from_element(values.len(), 1.0);
    Ok(CopyLaw { mean, base_var: problem.nu * problem.nu, u, shrink })
}

/// Draw `m` exact co-sufficient copies of the stacked feature vector.
pub fn css_copies(
    problem: &CrtProblem,
    m: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<DVector<f64>>> {
    let law = css_law(problem)?;
    Ok((0..m).map(|_| law.sample(rng)).collect())
}

/// Copy law conditioned on a perturbed least-squares estimate:
/// `N(Z* theta_hat, (I + (d/sigma^2) Z* Z*')^{-1})`.
///
/// The closed form holds for unit feature noise only; other `nu` are
/// rejected rather than silently rescaled.
pub fn acss_ols_law(
    problem: &CrtProblem,
    theta_hat: &DVector<f64>,
    sigma: f64,
) -> Result<CopyLaw> {
    if (problem.nu - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "the least-squares copy law is derived for nu = 1 (got nu = {})",
            problem.nu
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma = {sigma} must be positive")));
    }
    let (_, z_star) = problem.stacked();
    if theta_hat.len() != problem.d() {
        return Err(Error::Dimension("theta_hat length must match the design width".into()));
    }
    let c = problem.d() as f64 / (sigma * sigma);
    let (u, values) = design_svd(&z_star)?;
    let shrink = DVector::from_fn(values.len(), |i, _| {
        let cl = c * values[i] * values[i];
        cl / (1.0 + cl)
    });
    Ok(CopyLaw { mean: &z_star * theta_hat, base_var: 1.0, u, shrink })
}

/// Draw `m` copies conditioned on the perturbed least-squares estimate.
pub fn acss_crt_copies_ols(
    problem: &CrtProblem,
    theta_hat: &DVector<f64>,
    sigma: f64,
    m: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<DVector<f64>>> {
    let law = acss_ols_law(problem, theta_hat, sigma)?;
    Ok((0..m).map(|_| law.sample(rng)).collect())
}

/// Copy law for the noise-augmentation mechanism. The estimator saw
/// `x_noise = X + sigma U` (labeled rows only), and conditionally on
/// `(theta_hat, x_noise)` the observed vector is
/// `N((sigma^2 Z theta_hat + nu^2 x_noise) / (sigma^2 + nu^2),
///    sigma^2 nu^2 / (sigma^2 + nu^2) I)`.
pub fn acss_gaussian_law(
    problem: &CrtProblem,
    theta_hat: &DVector<f64>,
    x_noise: &DVector<f64>,
    sigma: f64,
) -> Result<CopyLaw> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma = {sigma} must be positive")));
    }
    if theta_hat.len() != problem.d() || x_noise.len() != problem.n() {
        return Err(Error::Dimension(
            "theta_hat and x_noise must match the labeled design".into(),
        ));
    }
    let nu2 = problem.nu * problem.nu;
    let s2 = sigma * sigma;
    let mu = &problem.z * theta_hat;
    let mean = (mu * s2 + x_noise * nu2) / (s2 + nu2);
    Ok(CopyLaw {
        mean,
        base_var: s2 * nu2 / (s2 + nu2),
        u: DMatrix::zeros(problem.n(), 0),
        shrink: DVector::zeros(0),
    })
}

/// Draw `m` copies from the noise-augmentation law.
pub fn acss_crt_copies_gaussian(
    problem: &CrtProblem,
    theta_hat: &DVector<f64>,
    x_noise: &DVector<f64>,
    sigma: f64,
    m: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<DVector<f64>>> {
    let law = acss_gaussian_law(problem, theta_hat, x_noise, sigma)?;
    Ok((0..m).map(|_| law.sample(rng)).collect())
}

/// Squared distance between one co-sufficient copy and one least-squares
/// mechanism copy built from the *same* underlying Gaussian draws.
///
/// Sharing the noise couples the two mechanisms; the expected squared gap is
/// at most `4 sigma^2 (1/d) sum_i lambda_i^{-2}` over the design's singular
/// values, so the approximate mechanism converges to the exact one as
/// `sigma -> 0`.
pub fn coupled_copy_gap(
    problem: &CrtProblem,
    sigma: f64,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    let (x_star, z_star) = problem.stacked();
    let d = problem.d();
    let pert = draw_perturbation(rng, d, sigma);
    let fit = fit_ols_perturbed(&x_star, &z_star, &pert)?;
    let css = css_law(problem)?;
    let acss = acss_ols_law(problem, &fit.theta_hat, sigma)?;

    let eps = linalg::standard_normal_vector(problem.n_star(), rng);
    let sample_with = |law: &CopyLaw, eps: &DVector<f64>| -> DVector<f64> {
        let sd = law.base_var.sqrt();
        if law.u.ncols() == 0 {
            return &law.mean + eps * sd;
        }
        let proj = law.u.transpose() * eps;
        let scaled = DVector::from_fn(proj.len(), |i, _| {
            proj[i] * (1.0 - (1.0 - law.shrink[i]).max(0.0).sqrt())
        });
        &law.mean + (eps - &law.u * scaled) * sd
    };
    let x_css = sample_with(&css, &eps);
    let x_acss = sample_with(&acss, &eps);
    Ok((x_css - x_acss).norm_squared())
}

/// The coupling bound `4 sigma^2 (1/d) sum_i lambda_i^{-2}` on the expected
/// squared gap, from the design's nonzero singular values.
pub fn coupled_gap_bound(problem: &CrtProblem, sigma: f64) -> Result<f64> {
    let (_, z_star) = problem.stacked();
    let (_, values) = design_svd(&z_star)?;
    if values.len() < problem.d() {
        return Err(Error::Singular("the coupling bound needs a full-rank design".into()));
    }
    let inv_sq: f64 = values.iter().map(|l| 1.0 / (l * l)).sum();
    Ok(4.0 * sigma * sigma * inv_sq / problem.d() as f64)
}

// ---------------------------------------------------------------------------
// Statistic and p-values.
// ---------------------------------------------------------------------------

/// Distilled statistic: the inner product of the response residual with the
/// feature residual, `(Y - Z xi_hat)' (x - Z theta_hat)`.
///
/// Distillation makes the statistic linear in the copy, so its copy
/// distribution under a Gaussian law is an explicit normal.
pub fn distilled_statistic(
    problem: &CrtProblem,
    theta_hat: &DVector<f64>,
    xi_hat: &DVector<f64>,
    x_candidate: &DVector<f64>,
) -> f64 {
    let resid_y = &problem.y - &problem.z * xi_hat;
    let n = problem.n();
    let x_lab = x_candidate.rows(0, n);
    resid_y.dot(&(x_lab - &problem.z * theta_hat))
}

/// Which tail of the copy distribution counts as evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Upper,
    Lower,
    TwoSided,
}

/// Exact p-value of the distilled statistic under a Gaussian copy law,
/// no resampling involved.
///
/// The statistic `T = v'(X_copy - Z theta_hat)` with `v = Y - Z xi_hat` is
/// normal under `law`; the p-value is the observed tail probability. If the
/// law is degenerate for this `v` (zero variance), the p-value is the exact
/// limit: 1 when the observed value sits at (or on the null side of) the
/// point mass, 0 beyond it.
pub fn resampling_free_pvalue(
    problem: &CrtProblem,
    law: &CopyLaw,
    t_obs: f64,
    theta_hat: &DVector<f64>,
    xi_hat: &DVector<f64>,
    side: Side,
) -> Result<f64> {
    if law.len() != problem.n_star() {
        return Err(Error::Dimension("copy law dimension must match the stacked data".into()));
    }
    let resid_y = &problem.y - &problem.z * xi_hat;
    // Zero-pad the response residual to the stacked length: unlabeled rows
    // enter the copies but not the statistic.
    let mut v = DVector::zeros(problem.n_star());
    v.rows_mut(0, problem.n()).copy_from(&resid_y);
    let (lin_mean, lin_var) = law.linear_moments(&v);
    let mean = lin_mean - resid_y.dot(&(&problem.z * theta_hat));

    if lin_var <= 0.0 {
        let diff = t_obs - mean;
        return Ok(match side {
            Side::Upper => {
                if diff > 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
            Side::Lower => {
                if diff < 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
            Side::TwoSided => {
                if diff != 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
        });
    }
    let zscore = (t_obs - mean) / lin_var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    Ok(match side {
        Side::Upper => normal.sf(zscore),
        Side::Lower => normal.cdf(zscore),
        Side::TwoSided => 2.0 * normal.sf(zscore.abs()).min(0.5),
    })
}

// ---------------------------------------------------------------------------
// Dual-feasible response direction.
// ---------------------------------------------------------------------------

/// Maximize `Y' v` over `{v : ||Z'v||_inf <= lambda_n, ||v||_2 <= 1}`.
///
/// This is the support function of the lasso dual-feasible set intersected
/// with the unit ball; its value calibrates how much of the response a
/// design-orthogonal direction can capture. Solved by projected gradient
/// ascent with Dykstra's alternating projections onto the ball and the
/// slabs, restarted from random feasible points.
pub fn solve_ytilde(
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    lambda_n: f64,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    let n = y.len();
    if z.nrows() != n {
        return Err(Error::Dimension("y and z must have matching row counts".into()));
    }
    if !(lambda_n >= 0.0) {
        return Err(Error::Config(format!("lambda_n = {lambda_n} must be nonnegative")));
    }
    let y_norm = y.norm();
    if y_norm == 0.0 {
        return Ok(DVector::zeros(n));
    }

    let feas_tol = 1e-8;
    let feasible = |v: &DVector<f64>| -> bool {
        if v.norm() > 1.0 + feas_tol {
            return false;
        }
        let zt = z.transpose() * v;
        zt.iter().all(|c| c.abs() <= lambda_n + feas_tol)
    };

    // The unconstrained optimum: if the scaled response itself satisfies the
    // slab constraints, nothing beats it.
    let y_unit = y / y_norm;
    if feasible(&y_unit) {
        return Ok(y_unit);
    }

    // Dykstra's algorithm for projection onto the intersection of the unit
    // ball and the slabs {|z_j'v| <= lambda_n}.
    let d = z.ncols();
    let col_norms: Vec<f64> = (0..d).map(|j| z.column(j).norm_squared()).collect();
    let project = |target: &DVector<f64>| -> DVector<f64> {
        let mut v = target.clone();
        let mut corrections: Vec<DVector<f64>> = vec![DVector::zeros(n); d + 1];
        for _ in 0..400 {
            let mut moved = 0.0f64;
            for j in 0..=d {
                let prev = &v + &corrections[j];
                let projected = if j == d {
                    let norm = prev.norm();
                    if norm > 1.0 {
                        &prev / norm
                    } else {
                        prev.clone()
                    }
                } else if col_norms[j] == 0.0 {
                    prev.clone()
                } else {
                    let dot = z.column(j).dot(&prev);
                    let excess = dot.abs() - lambda_n;
                    if excess > 0.0 {
                        &prev - z.column(j) * (excess * dot.signum() / col_norms[j])
                    } else {
                        prev.clone()
                    }
                };
                corrections[j] = &prev - &projected;
                moved = moved.max((&projected - &v).norm());
                v = projected;
            }
            if moved < 1e-12 {
                break;
            }
        }
        v
    };

    let ascend = |start: DVector<f64>| -> DVector<f64> {
        let mut v = start;
        let step = 0.25 / y_norm;
        for _ in 0..600 {
            let next = project(&(&v + y * step));
            if (&next - &v).norm() < 1e-11 {
                v = next;
                break;
            }
            v = next;
        }
        v
    };

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0x59_74_69);
    let mut best: Option<(f64, DVector<f64>)> = None;
    let restarts = opts.restarts.max(20);
    for r in 0..=restarts {
        let start = if r == 0 {
            project(&y_unit)
        } else {
            project(&(linalg::standard_normal_vector(n, &mut rng) / (n as f64).sqrt()))
        };
        let v = ascend(start);
        if !feasible(&v) {
            continue;
        }
        let value = y.dot(&v);
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, v));
        }
    }
    best.map(|(_, v)| v)
        .ok_or_else(|| Error::NoConvergence { max_iter: 600, residual: f64::NAN })
}

// ---------------------------------------------------------------------------
// Baseline: debiased lasso.
// ---------------------------------------------------------------------------

/// Two-sided p-value for the coefficient of `x` in the regression of `y` on
/// `(x, z)`, via the low-dimensional projection (debiased lasso) estimator.
///
/// `lambda_y` and `lambda_x` are the lasso penalties for the response and
/// feature regressions on `z`; the default `sqrt(2 n log d)` matches the
/// residual-sum-of-squares objective used throughout.
pub fn debiased_lasso_pvalue(
    problem: &CrtProblem,
    lambda_y: Option<f64>,
    lambda_x: Option<f64>,
    opts: &SolverOptions,
) -> Result<f64> {
    let (n, d) = (problem.n(), problem.d());
    let default_lambda = (2.0 * n as f64 * (d as f64).ln().max(1.0)).sqrt();
    let lam_y = lambda_y.unwrap_or(default_lambda);
    let lam_x = lambda_x.unwrap_or(default_lambda);

    let model = GaussianLinear::new(problem.z.clone(), 1.0)?;
    let zero = Perturbation::zero(d);
    let xi = fit_penalized(&model, &problem.y, &zero, &Penalty::l1(lam_y, d)?, opts)?.theta_hat;
    let gamma = fit_penalized(&model, &problem.x, &zero, &Penalty::l1(lam_x, d)?, opts)?.theta_hat;

    let zeta = &problem.x - &problem.z * &gamma;
    let denom = zeta.dot(&problem.x);
    if denom.abs() < 1e-12 {
        return Err(Error::Singular("feature residual is orthogonal to the feature".into()));
    }
    let resid_y = &problem.y - &problem.z * &xi;
    let beta = zeta.dot(&resid_y) / denom;
    let fitted_resid = resid_y - &problem.x * beta;
    let sigma2 = fitted_resid.norm_squared() / n as f64;
    let se = (sigma2 * zeta.norm_squared()).sqrt() / denom.abs();
    if se == 0.0 {
        return Ok(if beta == 0.0 { 1.0 } else { 0.0 });
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    Ok(2.0 * normal.sf((beta / se).abs()).min(0.5))
}

// ---------------------------------------------------------------------------
// The assembled test.
// ---------------------------------------------------------------------------

/// How copies of the feature are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrtMechanism {
    /// Exact co-sufficient sampling; no estimator involved.
    Css,
    /// Perturbed least squares with the spectral copy law (`nu = 1` only).
    AcssOls,
    /// Noise augmentation around an arbitrary estimator of `theta`.
    AcssGaussian,
}

/// Estimator of the feature model's coefficients.
#[derive(Debug, Clone)]
pub enum CrtEstimator {
    /// Ordinary least squares (only meaningful with [`CrtMechanism::AcssOls`]).
    Ols,
    /// The true coefficients: copies come from the exact conditional law.
    Oracle(DVector<f64>),
    Lasso { lambda: f64 },
    Scad { lambda: f64, a: f64 },
    Mcp { lambda: f64, gamma: f64 },
    /// SCAD on contiguous coordinate blocks of the given size.
    GroupScad { lambda: f64, a: f64, group_size: usize },
    /// Iterative hard thresholding at sparsity `k`.
    Iht { k: usize },
}

/// Configuration for [`run_crt`].
#[derive(Debug, Clone)]
pub struct CrtConfig {
    pub mechanism: CrtMechanism,
    pub estimator: CrtEstimator,
    /// Perturbation or augmentation-noise scale.
    pub sigma: f64,
    /// Number of Monte Carlo copies; `None` uses the exact normal law of the
    /// distilled statistic instead of resampling.
    pub m: Option<usize>,
    /// Penalty for the lasso of the response on the covariates
    /// (`sqrt(2 n log d)` when unset).
    pub xi_lambda: Option<f64>,
    pub side: Side,
    pub solver: SolverOptions,
}

impl CrtConfig {
    pub fn new(mechanism: CrtMechanism, estimator: CrtEstimator, sigma: f64) -> Self {
        Self {
            mechanism,
            estimator,
            sigma,
            m: None,
            xi_lambda: None,
            side: Side::Upper,
            solver: SolverOptions::default(),
        }
    }
}

/// Result of one conditional randomization test.
#[derive(Debug, Clone)]
pub struct CrtOutput {
    pub pval: f64,
    pub t_obs: f64,
    pub theta_hat: DVector<f64>,
    pub xi_hat: DVector<f64>,
    /// Copies actually drawn (empty on the resampling-free path).
    pub copies: usize,
}

fn contiguous_groups(d: usize, size: usize) -> Result<Vec<Vec<usize>>> {
    if size == 0 || d % size != 0 {
        return Err(Error::Config(format!(
            "group size {size} must evenly divide the dimension {d}"
        )));
    }
    Ok((0..d / size).map(|g| (g * size..(g + 1) * size).collect()).collect())
}

fn penalty_for(estimator: &CrtEstimator, d: usize) -> Result<Option<Penalty>> {
    Ok(match estimator {
        CrtEstimator::Lasso { lambda } => Some(Penalty::l1(*lambda, d)?),
        CrtEstimator::Scad { lambda, a } => Some(Penalty::scad(*lambda, *a, d)?),
        CrtEstimator::Mcp { lambda, gamma } => Some(Penalty::mcp(*lambda, *gamma, d)?),
        CrtEstimator::GroupScad { lambda, a, group_size } => {
            Some(Penalty::group_scad(*lambda, *a, contiguous_groups(d, *group_size)?, d)?)
        }
        _ => None,
    })
}

/// Run one conditional randomization test.
///
/// The response-side lasso `xi_hat` is fit once (it never involves `x`), the
/// feature-side estimate follows the configured mechanism, and the p-value
/// comes either from `m` Monte Carlo copies or from the exact normal law of
/// the distilled statistic.
pub fn run_crt(
    problem: &CrtProblem,
    config: &CrtConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<CrtOutput> {
    let (n, d) = (problem.n(), problem.d());
    let xi_lambda =
        config.xi_lambda.unwrap_or_else(|| (2.0 * n as f64 * (d as f64).ln().max(1.0)).sqrt());
    let response_model = GaussianLinear::new(problem.z.clone(), 1.0)?;
    let xi_hat = fit_penalized(
        &response_model,
        &problem.y,
        &Perturbation::zero(d),
        &Penalty::l1(xi_lambda, d)?,
        &config.solver,
    )?
    .theta_hat;

    let (theta_hat, law) = match config.mechanism {
        CrtMechanism::Css => {
            // No estimator: the conditional law given the sufficient statistic
            // is parameter-free. theta_hat is only used to center the
            // statistic, and any fixed value yields the same exchangeability;
            // zero keeps the statistic interpretable.
            (DVector::zeros(d), css_law(problem)?)
        }
        CrtMechanism::AcssOls => {
            if !matches!(config.estimator, CrtEstimator::Ols) {
                return Err(Error::Config(
                    "the least-squares mechanism requires the Ols estimator".into(),
                ));
            }
            let (x_star, z_star) = problem.stacked();
            let pert = draw_perturbation(rng, d, config.sigma);
            let fit = fit_ols_perturbed(&x_star, &z_star, &pert)?;
            let law = acss_ols_law(problem, &fit.theta_hat, config.sigma)?;
            (fit.theta_hat, law)
        }
        CrtMechanism::AcssGaussian => match &config.estimator {
            CrtEstimator::Ols => {
                return Err(Error::Config(
                    "use the AcssOls mechanism for the least-squares estimator".into(),
                ));
            }
            CrtEstimator::Oracle(theta0) => {
                if theta0.len() != d {
                    return Err(Error::Dimension("oracle theta length mismatch".into()));
                }
                // Known theta: the exact conditional law of X given Z.
                let law = CopyLaw {
                    mean: &problem.z * theta0,
                    base_var: problem.nu * problem.nu,
                    u: DMatrix::zeros(n, 0),
                    shrink: DVector::zeros(0),
                };
                (theta0.clone(), law)
            }
            est => {
                let noise = linalg::standard_normal_vector(n, rng) * config.sigma;
                let x_noise = &problem.x + noise;
                let theta_hat = match est {
                    CrtEstimator::Iht { k } => {
                        fit_iht(&problem.z, &x_noise, problem.nu, *k, &config.solver)?
                    }
                    _ => {
                        let penalty = penalty_for(est, d)?.expect("covered by match arms");
                        let feature_model =
                            GaussianLinear::new(problem.z.clone(), problem.nu)?;
                        fit_penalized(
                            &feature_model,
                            &x_noise,
                            &Perturbation::zero(d),
                            &penalty,
                            &config.solver,
                        )?
                        .theta_hat
                    }
                };
                let law = acss_gaussian_law(problem, &theta_hat, &x_noise, config.sigma)?;
                (theta_hat, law)
            }
        },
    };

    let t_obs = distilled_statistic(problem, &theta_hat, &xi_hat, &{
        // The statistic reads only the labeled rows; pad so the slice in
        // distilled_statistic lines up for stacked and unstacked laws alike.
        let mut full = DVector::zeros(law.len().max(n));
        full.rows_mut(0, n).copy_from(&problem.x);
        full
    });

    match config.m {
        Some(m) if m > 0 => {
            let t_copies: Vec<f64> = (0..m)
                .map(|_| {
                    let copy = law.sample(rng);
                    distilled_statistic(problem, &theta_hat, &xi_hat, &copy)
                })
                .collect();
            let pval = match config.side {
                Side::Upper => pval_unweighted(t_obs, &t_copies),
                Side::Lower => {
                    pval_unweighted(-t_obs, &t_copies.iter().map(|t| -t).collect::<Vec<_>>())
                }
                Side::TwoSided => pval_unweighted(
                    t_obs.abs(),
                    &t_copies.iter().map(|t| t.abs()).collect::<Vec<_>>(),
                ),
            };
            Ok(CrtOutput { pval, t_obs, theta_hat, xi_hat, copies: m })
        }
        _ => {
            let pval =
                resampling_free_pvalue(problem, &law, t_obs, &theta_hat, &xi_hat, config.side)?;
            Ok(CrtOutput { pval, t_obs, theta_hat, xi_hat, copies: 0 })
        }
    }
}
