//! Exchangeable-copy samplers and the weighted randomization p-value.
//!
//! Copies can come from three places:
//!
//! * closed-form Gaussian conditionals ([`sample_copies_gaussian_additive`],
//!   [`sample_copies_gaussian_acss`]) where the conditional law given the fit
//!   is exactly Gaussian and weights are uniform;
//! * an i.i.d. proposal from the fitted model, importance-weighted back to
//!   the conditional law;
//! * a von Mises–Fisher proposal on the observed per-group spheres for the
//!   two-group model, where the model's own density restricted to a sphere
//!   is exactly vMF, so the importance weight reduces to the conditional
//!   law's remaining factors.
//!
//! Weights stay in log space throughout; an excluded candidate carries `−∞`
//! and simply never counts. A fit that fails its stationarity certificate
//! produces a [`CopySet::degenerate`] set whose p-value is exactly 1.

use nalgebra::DVector;
use rand::Rng;

use crate::density::{self, ConditioningStat, Variant};
use crate::estimator::{self, FitResult, SolverOptions};
use crate::linalg;
use crate::model::{BehrensFisher, Model};
use crate::penalty::Penalty;
use crate::{Error, Result};

/// Where a copy set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKind {
    IidModel,
    GaussianAdditive,
    GaussianAcss,
    SphereVmf,
    Degenerate,
}

/// M exchangeable copies plus importance weights for them and the original.
#[derive(Debug, Clone)]
pub struct CopySet {
    /// The sampled copies x̃₁ … x̃_M.
    pub copies: Vec<DVector<f64>>,
    /// Log importance weights, length M+1, the observed data's weight first.
    pub log_weights: Vec<f64>,
    pub proposal: ProposalKind,
    pub m: usize,
}

impl CopySet {
    /// The fallback when no usable fit exists: every copy equals the observed
    /// data, so any statistic ties everywhere and the p-value is exactly 1.
    pub fn degenerate(x: &DVector<f64>, m: usize) -> Self {
        Self {
            copies: vec![x.clone(); m],
            log_weights: vec![0.0; m + 1],
            proposal: ProposalKind::Degenerate,
            m,
        }
    }

    fn exact(copies: Vec<DVector<f64>>, proposal: ProposalKind) -> Self {
        let m = copies.len();
        Self { copies, log_weights: vec![0.0; m + 1], proposal, m }
    }
}

/// Log importance weight µ(x̃) tying a proposal draw back to the conditional
/// law: the conditional density divided by the model density f(x̃; θ̂).
///
/// This is the right weight for the i.i.d.-model proposal, and also for the
/// fixed-radius sphere proposals: there the proposal is f restricted to the
/// observed spheres, and the restriction constants are shared by the original
/// and every copy, so they cancel in the p-value.
pub fn importance_log_weight(
    model: &dyn Model,
    x_tilde: &DVector<f64>,
    stat: &ConditioningStat,
    opts: &SolverOptions,
) -> Result<f64> {
    let log_cond = match &stat.variant {
        Variant::Penalized { .. } => density::log_unnorm_density(model, x_tilde, stat, opts)?,
        Variant::Trimmed { .. } => {
            let gl = model
                .as_any()
                .downcast_ref::<crate::model::GaussianLinear>()
                .ok_or_else(|| Error::Config("trimmed conditioning requires the Gaussian linear model".into()))?;
            density::log_unnorm_density_mtle(gl, x_tilde, stat)?
        }
        Variant::TrimmedFirstGroup { .. } => {
            let bf = model
                .as_any()
                .downcast_ref::<BehrensFisher>()
                .ok_or_else(|| Error::Config("first-group trimming requires the two-group model".into()))?;
            density::log_unnorm_density_mtle_bf(bf, x_tilde, stat)?
        }
    };
    if log_cond == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(log_cond + model.neg_loglik(&stat.theta_hat, x_tilde)?)
}

/// Additive observation noise: x + σ·ε with ε standard normal.
pub fn perturb_observation<R: Rng + ?Sized>(x: &DVector<f64>, sigma: f64, rng: &mut R) -> DVector<f64> {
    x + linalg::standard_normal_vector(x.len(), rng) * sigma
}

/// Exact conditional copies for the Gaussian additive-mean model
/// X ~ N(µ, ν²I) perturbed in observation space: given µ̂ and the
/// observation-space gradient statistic ĝ = (µ̂ − X)/ν² + σw with
/// w ~ N(0, I_n/n), the conditional law of X is
/// N(µ̂ − c·ĝ, (σ²ν⁴/(σ²ν² + n))·I) with c = nν²/(σ²ν² + n).
pub fn sample_copies_gaussian_additive<R: Rng + ?Sized>(
    mu_hat: &DVector<f64>,
    g_hat: &DVector<f64>,
    nu: f64,
    sigma: f64,
    m: usize,
    rng: &mut R,
) -> Result<CopySet> {
    if mu_hat.len() != g_hat.len() {
        return Err(Error::Dimension("mean and gradient statistic lengths differ".into()));
    }
    if !(nu > 0.0 && sigma > 0.0) {
        return Err(Error::Config(format!("need positive scales, got nu = {nu}, sigma = {sigma}")));
    }
    let n = mu_hat.len() as f64;
    let denom = sigma * sigma * nu * nu + n;
    let c = n * nu * nu / denom;
    let sd = (sigma * sigma * nu.powi(4) / denom).sqrt();
    let mean = mu_hat - g_hat * c;
    let copies = (0..m)
        .map(|_| &mean + linalg::standard_normal_vector(mean.len(), rng) * sd)
        .collect();
    Ok(CopySet::exact(copies, ProposalKind::GaussianAdditive))
}

/// Exact conditional copies for the noise-augmentation scheme: the analyst
/// observes X_noise = X + σ·U (U standard normal), fits µ̂ to X_noise alone,
/// and regenerates X from its conditional law
/// N((σ²µ̂ + ν²X_noise)/(σ² + ν²), (σ²ν²/(σ² + ν²))·I).
/// Because µ̂ is a function of X_noise only, any estimator is admissible.
pub fn sample_copies_gaussian_acss<R: Rng + ?Sized>(
    mu_hat: &DVector<f64>,
    x_noise: &DVector<f64>,
    nu: f64,
    sigma: f64,
    m: usize,
    rng: &mut R,
) -> Result<CopySet> {
    if mu_hat.len() != x_noise.len() {
        return Err(Error::Dimension("mean and noisy-data lengths differ".into()));
    }
    if !(nu > 0.0 && sigma > 0.0) {
        return Err(Error::Config(format!("need positive scales, got nu = {nu}, sigma = {sigma}")));
    }
    let (s2, v2) = (sigma * sigma, nu * nu);
    let mean = (mu_hat * s2 + x_noise * v2) / (s2 + v2);
    let sd = (s2 * v2 / (s2 + v2)).sqrt();
    let copies = (0..m)
        .map(|_| &mean + linalg::standard_normal_vector(mean.len(), rng) * sd)
        .collect();
    Ok(CopySet::exact(copies, ProposalKind::GaussianAcss))
}

/// Copies for the two-group model from per-group sphere proposals.
///
/// Each resampled block keeps its observed Euclidean norm; on that sphere the
/// model density is exactly von Mises–Fisher with direction sign(µ̂)·1/√k and
/// concentration r√k·|µ̂|/γ̂. For trimmed fits only the kept first-group block
/// and the whole second group are resampled; trimmed-out observations are
/// carried over unchanged, which conditions on their values and keeps the
/// copies exchangeable.
pub fn sample_copies_sphere(
    model: &BehrensFisher,
    data: &DVector<f64>,
    stat: &ConditioningStat,
    m: usize,
    opts: &SolverOptions,
    rng: &mut dyn rand::RngCore,
) -> Result<CopySet> {
    model.check_data(data)?;
    if !model.in_domain(&stat.theta_hat) {
        return Err(Error::Domain("conditioning estimate outside the parameter domain".into()));
    }
    let (n0, n1) = (model.n0(), model.n1());
    let (mu, g0, g1) = (stat.theta_hat[0], stat.theta_hat[1], stat.theta_hat[2]);

    // Blocks to resample: (indices, variance of that group under θ̂).
    let blocks: Vec<(Vec<usize>, f64)> = match &stat.variant {
        Variant::Penalized { .. } => {
            vec![((0..n0).collect(), g0), ((n0..n0 + n1).collect(), g1)]
        }
        Variant::TrimmedFirstGroup { kept0 } => {
            vec![(kept0.clone(), g0), ((n0..n0 + n1).collect(), g1)]
        }
        Variant::Trimmed { .. } => {
            return Err(Error::Config("sphere proposals pair with the two-group model's variants".into()))
        }
    };

    let mut copies = Vec::with_capacity(m);
    for _ in 0..m {
        let mut copy = data.clone();
        for (idx, gamma) in &blocks {
            let k = idx.len();
            let block = linalg::gather(data, idx);
            let r = block.norm();
            if r == 0.0 {
                continue;
            }
            // f(x; θ̂) on the sphere of radius r: ∝ exp((µ̂/γ̂)·Σxᵢ) = vMF.
            let kappa = (r * (k as f64).sqrt() * mu.abs() / gamma).max(0.0);
            let dir_sign = if mu >= 0.0 { 1.0 } else { -1.0 };
            let mean_dir = DVector::from_element(k, dir_sign / (k as f64).sqrt());
            let u = vmf::sample(&mean_dir, kappa, rng);
            for (pos, &i) in idx.iter().enumerate() {
                copy[i] = r * u[pos];
            }
        }
        copies.push(copy);
    }

    let mut log_weights = Vec::with_capacity(m + 1);
    log_weights.push(importance_log_weight(model, data, stat, opts)?);
    for copy in &copies {
        log_weights.push(importance_log_weight(model, copy, stat, opts)?);
    }
    Ok(CopySet { copies, log_weights, proposal: ProposalKind::SphereVmf, m })
}

/// Unweighted randomization p-value with inclusive ties:
/// (1 + #{T(x̃ᵢ) ≥ T(X)}) / (M + 1).
pub fn pval_unweighted(t_obs: f64, t_copies: &[f64]) -> f64 {
    let hits = t_copies.iter().filter(|&&t| t >= t_obs).count();
    (1.0 + hits as f64) / (1.0 + t_copies.len() as f64)
}

/// Weighted randomization p-value
/// [µ(X) + Σ µ(x̃ᵢ)·1{T(x̃ᵢ) ≥ T(X)}] / [µ(X) + Σ µ(x̃ᵢ)]
/// with log-domain weights, the original's first. Degenerate weight sets
/// (everything excluded) give 1.
pub fn pval_weighted(t_obs: f64, t_copies: &[f64], log_weights: &[f64]) -> Result<f64> {
    if log_weights.len() != t_copies.len() + 1 {
        return Err(Error::Dimension(format!(
            "need {} weights for {} copies, got {}",
            t_copies.len() + 1,
            t_copies.len(),
            log_weights.len()
        )));
    }
    let max = log_weights.iter().copied().filter(|w| w.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(1.0);
    }
    let w = |lw: f64| -> f64 {
        if lw == f64::NEG_INFINITY {
            0.0
        } else {
            (lw - max).exp()
        }
    };
    let mut num = w(log_weights[0]);
    let mut den = num;
    for (i, &t) in t_copies.iter().enumerate() {
        let wi = w(log_weights[i + 1]);
        den += wi;
        if t >= t_obs {
            num += wi;
        }
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(num / den)
}

/// Which estimator the sampling pipeline should run.
#[derive(Debug, Clone)]
pub enum EstimatorSpec {
    /// No estimation: the parameter is known and copies are i.i.d. from it.
    Oracle { theta0: DVector<f64> },
    /// Penalized (or plain) perturbed maximum likelihood.
    PenalizedMle { penalty: Penalty },
    /// Trimmed likelihood keeping h observations (linear model), or keeping
    /// h first-group observations (two-group model).
    Mtle { h: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalSpec {
    /// Propose copies i.i.d. from the fitted model and importance-weight.
    IidModel,
    /// Two-group model only: per-group sphere proposals.
    SphereVmf,
}

#[derive(Debug, Clone)]
pub struct AcssConfig {
    pub estimator: EstimatorSpec,
    pub proposal: ProposalSpec,
    /// Perturbation scale σ.
    pub sigma: f64,
    /// Number of copies M.
    pub m: usize,
    pub solver: SolverOptions,
}

#[derive(Debug)]
pub struct AcssOutput {
    pub copy_set: CopySet,
    /// The perturbed fit, when the pipeline ran one.
    pub fit: Option<FitResult>,
    pub stat: Option<ConditioningStat>,
}

/// The full sampling pipeline: perturb, fit, certify, and draw exchangeable
/// copies. A failed certificate yields degenerate copies (p-value 1), never
/// an error.
pub fn run_acss(
    model: &dyn Model,
    data: &DVector<f64>,
    config: &AcssConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<AcssOutput> {
    model.check_data(data)?;
    if config.m == 0 {
        return Err(Error::Config("need at least one copy".into()));
    }

    match (&config.estimator, config.proposal) {
        (EstimatorSpec::Oracle { theta0 }, ProposalSpec::IidModel) => {
            model.check_theta(theta0)?;
            let copies: Result<Vec<_>> = (0..config.m).map(|_| model.sample_data(theta0, rng)).collect();
            Ok(AcssOutput {
                copy_set: CopySet::exact(copies?, ProposalKind::IidModel),
                fit: None,
                stat: None,
            })
        }
        (EstimatorSpec::Oracle { .. }, ProposalSpec::SphereVmf) => {
            Err(Error::Config("sphere proposals need a fitted conditional law".into()))
        }
        (EstimatorSpec::PenalizedMle { penalty }, proposal) => {
            let pert = estimator::draw_perturbation(rng, model.dim(), config.sigma);
            let fit = estimator::fit_penalized(model, data, &pert, penalty, &config.solver)?;
            if !fit.ssosp {
                return Ok(AcssOutput {
                    copy_set: CopySet::degenerate(data, config.m),
                    fit: Some(fit),
                    stat: None,
                });
            }
            let stat = ConditioningStat::penalized(&fit, penalty, config.sigma)?;
            let copy_set = match proposal {
                ProposalSpec::IidModel => {
                    let mut copies = Vec::with_capacity(config.m);
                    for _ in 0..config.m {
                        copies.push(model.sample_data(&fit.theta_hat, rng)?);
                    }
                    let mut log_weights = Vec::with_capacity(config.m + 1);
                    log_weights.push(importance_log_weight(model, data, &stat, &config.solver)?);
                    for copy in &copies {
                        log_weights.push(importance_log_weight(model, copy, &stat, &config.solver)?);
                    }
                    CopySet { copies, log_weights, proposal: ProposalKind::IidModel, m: config.m }
                }
                ProposalSpec::SphereVmf => {
                    let bf = model
                        .as_any()
                        .downcast_ref::<BehrensFisher>()
                        .ok_or_else(|| Error::Config("sphere proposals require the two-group model".into()))?;
                    sample_copies_sphere(bf, data, &stat, config.m, &config.solver, rng)?
                }
            };
            Ok(AcssOutput { copy_set, fit: Some(fit), stat: Some(stat) })
        }
        (EstimatorSpec::Mtle { h }, ProposalSpec::SphereVmf) => {
            let bf = model
                .as_any()
                .downcast_ref::<BehrensFisher>()
                .ok_or_else(|| Error::Config("sphere proposals require the two-group model".into()))?;
            let pert = estimator::draw_perturbation(rng, model.dim(), config.sigma);
            let fit = estimator::fit_mtle_bf(bf, data, &pert, *h, &config.solver, rng)?;
            if !fit.ssosp {
                return Ok(AcssOutput {
                    copy_set: CopySet::degenerate(data, config.m),
                    fit: Some(fit),
                    stat: None,
                });
            }
            let stat = ConditioningStat::trimmed_first_group(&fit, bf.n0(), config.sigma)?;
            let copy_set = sample_copies_sphere(bf, data, &stat, config.m, &config.solver, rng)?;
            Ok(AcssOutput { copy_set, fit: Some(fit), stat: Some(stat) })
        }
        (EstimatorSpec::Mtle { .. }, ProposalSpec::IidModel) => Err(Error::Config(
            "an i.i.d. proposal can essentially never re-select a trimmed fit's kept set; use sphere proposals".into(),
        )),
    }
}

/// Von Mises–Fisher sampling on the unit sphere of R^p.
pub(crate) mod vmf {
    use nalgebra::DVector;
    use rand::Rng;
    use rand_distr::{Beta, Distribution};

    use crate::linalg;

    /// One draw from vMF(mean_dir, kappa). `mean_dir` must be unit length;
    /// kappa = 0 falls back to the uniform law on the sphere.
    pub fn sample(mean_dir: &DVector<f64>, kappa: f64, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        let p = mean_dir.len();
        if p == 1 {
            // S⁰ = {−1, +1}: logistic choice between the two poles.
            let p_plus = 1.0 / (1.0 + (-2.0 * kappa).exp());
            let sign = if rng.gen::<f64>() < p_plus { 1.0 } else { -1.0 };
            return mean_dir * sign;
        }
        if kappa == 0.0 {
            loop {
                let z = linalg::standard_normal_vector(p, rng);
                let n = z.norm();
                if n > 0.0 {
                    return z / n;
                }
            }
        }

        // Wood's rejection sampler for the cosine w = uᵀmean_dir, kept in the
        // log domain so large kappa stays stable.
        let pm1 = (p - 1) as f64;
        let b = (-2.0 * kappa + (4.0 * kappa * kappa + pm1 * pm1).sqrt()) / pm1;
        let x0 = (1.0 - b) / (1.0 + b);
        let c = kappa * x0 + pm1 * (1.0 - x0 * x0).ln();
        let beta = Beta::new(pm1 / 2.0, pm1 / 2.0).expect("shape parameters are positive");
        let w = loop {
            let t: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + b) * t) / (1.0 - (1.0 - b) * t);
            let u: f64 = rng.gen();
            if kappa * w + pm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };

        // Tangential part: uniform direction orthogonal to the mean.
        let v = loop {
            let z = linalg::standard_normal_vector(p, rng);
            let perp = &z - mean_dir * mean_dir.dot(&z);
            let n = perp.norm();
            if n > 0.0 {
                break perp / n;
            }
        };
        let out = mean_dir * w + v * (1.0 - w * w).max(0.0).sqrt();
        let n = out.norm();
        out / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianLinear;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    /// E[w] and Var[w] for the vMF cosine against Simpson quadrature. The
    /// substitution w = cos φ turns the density into
    /// exp(κ cos φ)(sin φ)^{p−2} on [0, π], smooth for every p ≥ 2.
    fn vmf_cosine_moments(p: usize, kappa: f64) -> (f64, f64) {
        let pow = p as f64 - 2.0;
        let f = |phi: f64| -> f64 { (kappa * (phi.cos() - 1.0)).exp() * phi.sin().max(0.0).powf(pow) };
        let steps = 200_001;
        let dphi = std::f64::consts::PI / (steps - 1) as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..steps {
            let phi = i as f64 * dphi;
            let coef = if i == 0 || i == steps - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let fw = f(phi) * coef;
            let w = phi.cos();
            z += fw;
            m1 += fw * w;
            m2 += fw * w * w;
        }
        let mean = m1 / z;
        (mean, m2 / z - mean * mean)
    }

    #[test]
    fn vmf_cosine_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n_draws = 20_000;
        for &p in &[2usize, 3, 5, 10] {
            for &kappa in &[0.0f64, 0.5, 2.0, 10.0, 50.0] {
                let mut dir = DVector::zeros(p);
                dir[0] = 1.0;
                // Rotate the mean off-axis to exercise the tangential step.
                let mut mean_dir = DVector::from_element(p, 1.0);
                mean_dir /= mean_dir.norm();
                let mut sum = 0.0;
                for _ in 0..n_draws {
                    let u = vmf::sample(&mean_dir, kappa, &mut rng);
                    assert_relative_eq!(u.norm(), 1.0, epsilon = 1e-12);
                    sum += u.dot(&mean_dir);
                }
                let got = sum / n_draws as f64;
                let (want, var) = vmf_cosine_moments(p, kappa);
                let se = (var / n_draws as f64).sqrt();
                assert!(
                    (got - want).abs() <= 4.0 * se + 1e-4,
                    "p={p} kappa={kappa}: {got} vs {want} (se {se:.2e})"
                );
            }
        }
    }

    #[test]
    fn vmf_on_the_zero_sphere_picks_poles_by_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dir = DVector::from_row_slice(&[1.0]);
        let mut plus = 0;
        let n = 40_000;
        let kappa = 1.0;
        for _ in 0..n {
            if vmf::sample(&dir, kappa, &mut rng)[0] > 0.0 {
                plus += 1;
            }
        }
        let want = 1.0 / (1.0 + (-2.0f64 * kappa).exp());
        let got = plus as f64 / n as f64;
        let se = (want * (1.0 - want) / n as f64).sqrt();
        assert!((got - want).abs() <= 4.0 * se, "{got} vs {want}");
    }

    #[test]
    fn gaussian_additive_law_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 3;
        let mu_hat = DVector::from_row_slice(&[1.0, -0.5, 2.0]);
        let g_hat = DVector::from_row_slice(&[0.2, 0.0, -0.4]);
        let (nu, sigma) = (1.3, 0.9);
        let m = 100_000;
        let set = sample_copies_gaussian_additive(&mu_hat, &g_hat, nu, sigma, m, &mut rng).unwrap();
        assert_eq!(set.proposal, ProposalKind::GaussianAdditive);
        assert!(set.log_weights.iter().all(|&w| w == 0.0));

        let nn = n as f64;
        let denom = sigma * sigma * nu * nu + nn;
        let want_mean = &mu_hat - &g_hat * (nn * nu * nu / denom);
        let want_var = sigma * sigma * nu.powi(4) / denom;
        for j in 0..n {
            let mean_j = set.copies.iter().map(|c| c[j]).sum::<f64>() / m as f64;
            let se = (want_var / m as f64).sqrt();
            assert!((mean_j - want_mean[j]).abs() <= 4.0 * se, "coord {j}");
            let var_j = set.copies.iter().map(|c| (c[j] - mean_j).powi(2)).sum::<f64>() / m as f64;
            let se_var = want_var * (2.0 / m as f64).sqrt();
            assert!((var_j - want_var).abs() <= 4.0 * se_var, "coord {j} variance");
        }
    }

    #[test]
    fn gaussian_additive_limits() {
        // σ → 0 pins the copies to the data encoded in ĝ; σ → ∞ forgets it.
        let mu_hat = DVector::from_row_slice(&[1.0, 2.0]);
        let x = DVector::from_row_slice(&[1.6, 1.1]);
        let nu = 1.0;
        // ĝ with w = 0: (µ̂ − x)/ν².
        let g_hat = (&mu_hat - &x) / (nu * nu);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tiny = sample_copies_gaussian_additive(&mu_hat, &g_hat, nu, 1e-6, 50, &mut rng).unwrap();
        for c in &tiny.copies {
            assert!((c - &x).norm() < 1e-4);
        }
        let huge = sample_copies_gaussian_additive(&mu_hat, &g_hat, nu, 1e6, 50_000, &mut rng).unwrap();
        let mean0 = huge.copies.iter().map(|c| c[0]).sum::<f64>() / 50_000.0;
        assert!((mean0 - mu_hat[0]).abs() < 0.02, "{mean0}");
    }

    #[test]
    fn gaussian_acss_posterior_mixture() {
        let mu_hat = DVector::from_row_slice(&[0.0, 1.0]);
        let x_noise = DVector::from_row_slice(&[2.0, -1.0]);
        let (nu, sigma) = (1.0, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 100_000;
        let set = sample_copies_gaussian_acss(&mu_hat, &x_noise, nu, sigma, m, &mut rng).unwrap();
        let s2 = sigma * sigma;
        let want_mean = (&mu_hat * s2 + &x_noise) / (1.0 + s2);
        let want_var = s2 / (1.0 + s2);
        for j in 0..2 {
            let mean_j = set.copies.iter().map(|c| c[j]).sum::<f64>() / m as f64;
            assert!((mean_j - want_mean[j]).abs() <= 4.0 * (want_var / m as f64).sqrt());
        }
    }

    #[test]
    fn perturb_observation_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = DVector::zeros(20_000);
        let noisy = perturb_observation(&x, 0.5, &mut rng);
        let var = noisy.norm_squared() / 20_000.0;
        assert!((var - 0.25).abs() < 0.25 * 4.0 * (2.0f64 / 20_000.0).sqrt());
    }

    #[test]
    fn pval_frozen_example_and_edges() {
        // Weights (2, 1, 1), T(X) = 5, copies at 6 and 4.
        let lw = [2.0f64.ln(), 0.0, 0.0];
        let p = pval_weighted(5.0, &[6.0, 4.0], &lw).unwrap();
        assert_relative_eq!(p, 0.75, epsilon = 1e-12);

        // Shifting all log weights changes nothing.
        let shifted: Vec<f64> = lw.iter().map(|w| w + 123.4).collect();
        assert_relative_eq!(pval_weighted(5.0, &[6.0, 4.0], &shifted).unwrap(), 0.75, epsilon = 1e-12);

        // Inclusive ties.
        assert_relative_eq!(pval_unweighted(5.0, &[5.0, 4.0]), 2.0 / 3.0, epsilon = 1e-12);

        // All copies excluded, original alive: p = 1.
        let p = pval_weighted(5.0, &[9.0, 9.0], &[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert_relative_eq!(p, 1.0, epsilon = 1e-12);

        // Everything excluded: p = 1.
        let p = pval_weighted(5.0, &[9.0], &[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert_relative_eq!(p, 1.0, epsilon = 1e-12);

        // Bounds.
        assert!(pval_unweighted(0.0, &[1.0, 2.0, 3.0]) <= 1.0);
        assert_relative_eq!(pval_unweighted(9.0, &[1.0, 2.0, 3.0]), 0.25, epsilon = 1e-12);

        assert!(pval_weighted(1.0, &[2.0], &[0.0]).is_err());
    }

    #[test]
    fn degenerate_copy_set_forces_pval_one() {
        let x = DVector::from_row_slice(&[1.0, 2.0]);
        let set = CopySet::degenerate(&x, 7);
        let t = |v: &DVector<f64>| v[0] - v[1];
        let t_obs = t(&x);
        let t_copies: Vec<f64> = set.copies.iter().map(|c| t(c)).collect();
        assert_eq!(pval_unweighted(t_obs, &t_copies), 1.0);
        assert_eq!(pval_weighted(t_obs, &t_copies, &set.log_weights).unwrap(), 1.0);
    }

    #[test]
    fn sphere_copies_preserve_norms_and_weight_the_original_finite() {
        let model = BehrensFisher::new(12, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let theta0 = DVector::from_row_slice(&[0.7, 1.0, 2.5]);
        let x = model.sample_data(&theta0, &mut rng).unwrap();
        // Small groups only tolerate a small tilt before the perturbed
        // likelihood loses its local minimum in the variance directions.
        let sigma = 0.75;
        let pert = estimator::draw_perturbation(&mut rng, 3, sigma);
        let fit = estimator::fit_penalized(&model, &x, &pert, &Penalty::none(3), &opts()).unwrap();
        assert!(fit.ssosp, "{:?}", fit.ssosp_report);
        let stat = ConditioningStat::penalized(&fit, &Penalty::none(3), sigma).unwrap();
        let set = sample_copies_sphere(&model, &x, &stat, 40, &opts(), &mut rng).unwrap();

        let r0 = x.rows(0, 12).norm();
        let r1 = x.rows(12, 9).norm();
        for c in &set.copies {
            assert_relative_eq!(c.rows(0, 12).norm(), r0, epsilon = 1e-10);
            assert_relative_eq!(c.rows(12, 9).norm(), r1, epsilon = 1e-10);
        }
        assert!(set.log_weights[0].is_finite(), "certified original must be inside the support");
        let finite = set.log_weights.iter().filter(|w| w.is_finite()).count();
        assert!(finite > 20, "only {finite} of 41 weights finite");
    }

    #[test]
    fn sphere_copies_respect_trimming() {
        let model = BehrensFisher::new(10, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let theta0 = DVector::from_row_slice(&[0.0, 1.0, 1.5]);
        let mut x = model.sample_data(&theta0, &mut rng).unwrap();
        x[3] = 50.0;
        x[7] = -45.0;
        let sigma = 0.3;
        let pert = estimator::draw_perturbation(&mut rng, 3, sigma);
        let fit = estimator::fit_mtle_bf(&model, &x, &pert, 8, &opts(), &mut rng).unwrap();
        assert!(fit.ssosp, "{:?}", fit.ssosp_report);
        let kept = fit.trim_set.as_deref().unwrap().to_vec();
        assert!(!kept.contains(&3) && !kept.contains(&7));
        let stat = ConditioningStat::trimmed_first_group(&fit, 10, sigma).unwrap();
        let set = sample_copies_sphere(&model, &x, &stat, 30, &opts(), &mut rng).unwrap();
        for c in &set.copies {
            assert_eq!(c[3], x[3], "trimmed-out observations stay fixed");
            assert_eq!(c[7], x[7]);
        }
        assert!(set.log_weights[0].is_finite());
        // Membership can exclude copies whose resampled block would re-select
        // a different kept set; the surviving ones carry the inference.
        let finite = set.log_weights.iter().filter(|w| w.is_finite()).count();
        assert!(finite >= 2, "need surviving copies, got {finite}");
    }

    #[test]
    fn run_acss_oracle_copies_are_iid_model_draws() {
        let z = DMatrix::from_fn(6, 2, |r, c| ((r * 2 + c) as f64 * 0.37).sin());
        let model = GaussianLinear::new(z, 1.0).unwrap();
        let theta0 = DVector::from_row_slice(&[0.5, -0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = model.sample_data(&theta0, &mut rng).unwrap();
        let config = AcssConfig {
            estimator: EstimatorSpec::Oracle { theta0: theta0.clone() },
            proposal: ProposalSpec::IidModel,
            sigma: 1.0,
            m: 25,
            solver: opts(),
        };
        let out = run_acss(&model, &x, &config, &mut rng).unwrap();
        assert_eq!(out.copy_set.copies.len(), 25);
        assert!(out.copy_set.log_weights.iter().all(|&w| w == 0.0));
        assert!(out.fit.is_none());

        // Determinism given the same stream.
        let mut rng_a = ChaCha8Rng::seed_from_u64(5);
        let mut rng_b = ChaCha8Rng::seed_from_u64(5);
        let a = run_acss(&model, &x, &config, &mut rng_a).unwrap();
        let b = run_acss(&model, &x, &config, &mut rng_b).unwrap();
        assert_eq!(a.copy_set.copies[7], b.copy_set.copies[7]);
    }

    #[test]
    fn run_acss_penalized_iid_weights_are_finite_and_nontrivial() {
        let z = DMatrix::from_fn(8, 2, |r, c| ((r + 3 * c) as f64 * 0.71).cos());
        let model = GaussianLinear::new(z, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let theta0 = DVector::from_row_slice(&[1.0, 0.0]);
        let x = model.sample_data(&theta0, &mut rng).unwrap();
        let config = AcssConfig {
            estimator: EstimatorSpec::PenalizedMle { penalty: Penalty::l1(0.3, 2).unwrap() },
            proposal: ProposalSpec::IidModel,
            sigma: 0.5,
            m: 60,
            solver: opts(),
        };
        let out = run_acss(&model, &x, &config, &mut rng).unwrap();
        assert!(out.fit.as_ref().unwrap().ssosp, "{:?}", out.fit.as_ref().unwrap().ssosp_report);
        assert!(out.copy_set.log_weights[0].is_finite());
        let finite = out.copy_set.log_weights.iter().filter(|w| w.is_finite()).count();
        assert!(finite > 30);
        // Weights must actually vary: this proposal is not the conditional law.
        let lw: Vec<f64> = out.copy_set.log_weights.iter().copied().filter(|w| w.is_finite()).collect();
        let spread = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - lw.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > 1e-6);
    }

    #[test]
    fn run_acss_degenerates_without_a_certificate() {
        // Two identical columns: the unpenalized objective has a flat valley,
        // so no strict second-order point exists and the certificate must
        // fail no matter how hard the solver works.
        let z = DMatrix::from_fn(8, 2, |r, _| ((r as f64) * 0.71).cos());
        let model = GaussianLinear::new(z, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = model.sample_data(&DVector::from_row_slice(&[1.0, 0.0]), &mut rng).unwrap();
        let config = AcssConfig {
            estimator: EstimatorSpec::PenalizedMle { penalty: Penalty::none(2) },
            proposal: ProposalSpec::IidModel,
            sigma: 0.5,
            m: 10,
            solver: opts(),
        };
        let out = run_acss(&model, &x, &config, &mut rng).unwrap();
        assert_eq!(out.copy_set.proposal, ProposalKind::Degenerate);
        assert!(!out.fit.unwrap().ssosp);
        for c in &out.copy_set.copies {
            assert_eq!(c, &x);
        }
    }

    #[test]
    fn run_acss_rejects_unsupported_pairings() {
        let model = BehrensFisher::new(6, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = model
            .sample_data(&DVector::from_row_slice(&[0.0, 1.0, 1.0]), &mut rng)
            .unwrap();
        let bad = AcssConfig {
            estimator: EstimatorSpec::Mtle { h: 5 },
            proposal: ProposalSpec::IidModel,
            sigma: 10.0,
            m: 5,
            solver: opts(),
        };
        assert!(run_acss(&model, &x, &bad, &mut rng).is_err());

        let gl = GaussianLinear::new(DMatrix::from_element(4, 1, 1.0), 1.0).unwrap();
        let xg = DVector::from_row_slice(&[0.0, 0.1, -0.2, 0.3]);
        let bad_sphere = AcssConfig {
            estimator: EstimatorSpec::PenalizedMle { penalty: Penalty::none(1) },
            proposal: ProposalSpec::SphereVmf,
            sigma: 1.0,
            m: 5,
            solver: opts(),
        };
        assert!(run_acss(&gl, &xg, &bad_sphere, &mut rng).is_err());
    }

    #[test]
    fn run_acss_full_two_group_pipeline() {
        let model = BehrensFisher::new(12, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let theta0 = DVector::from_row_slice(&[0.3, 1.0, 2.0]);
        let x = model.sample_data(&theta0, &mut rng).unwrap();
        let config = AcssConfig {
            estimator: EstimatorSpec::PenalizedMle { penalty: Penalty::none(3) },
            proposal: ProposalSpec::SphereVmf,
            sigma: 0.75,
            m: 50,
            solver: opts(),
        };
        let out = run_acss(&model, &x, &config, &mut rng).unwrap();
        assert_eq!(out.copy_set.copies.len(), 50);
        assert_eq!(out.copy_set.proposal, ProposalKind::SphereVmf);
        assert!(out.copy_set.log_weights[0].is_finite());

        // A two-sided mean-difference statistic gives a sane p-value.
        let t = |v: &DVector<f64>| {
            let m0 = v.rows(0, 12).sum() / 12.0;
            let m1 = v.rows(12, 10).sum() / 10.0;
            (m0 - m1).abs()
        };
        let t_copies: Vec<f64> = out.copy_set.copies.iter().map(|c| t(c)).collect();
        let p = pval_weighted(t(&x), &t_copies, &out.copy_set.log_weights).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}
