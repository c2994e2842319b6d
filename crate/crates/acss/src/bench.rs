//! Declarative Monte Carlo experiment runner.
//!
//! A JSON [`ExperimentConfig`] names one of four studies (two-group location
//! testing under contamination, conditional-independence testing in a
//! high-dimensional linear model, a perturbation-scale sweep, and an
//! exactness suite), and [`run_experiment`] executes the full
//! grid × method × replication product on a thread pool. Every replication
//! gets a seed derived by hashing its coordinates, so results are identical
//! for any thread count and any partition of the grid. Failures become rows
//! with an error code; they never abort a sweep.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Cauchy, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::crt::{self, CrtConfig, CrtEstimator, CrtMechanism, CrtProblem, Side};
use crate::estimator::SolverOptions;
use crate::model::{BehrensFisher, GaussianLinear, Model};
use crate::penalty::Penalty;
use crate::sampler::{self, AcssConfig, EstimatorSpec, ProposalSpec};
use crate::seed;
use crate::{Error, Result};

/// The four built-in studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// Two-group common-mean test with a contaminated first group: penalized
    /// and trimmed samplers against the plain and oracle t-tests.
    BehrensFisher,
    /// Conditional-independence test of Y ⊥ X | Z in a linear model with
    /// d > n, comparing copy mechanisms and estimators.
    CiTest,
    /// Type-I error of the noise-augmented CRT as the perturbation scale σ
    /// grows, at β = 0.
    SigmaSweep,
    /// Exact-exchangeability checks: p-values that should be super-uniform
    /// by construction.
    ValiditySuite,
}

impl Experiment {
    pub fn id(self) -> &'static str {
        match self {
            Experiment::BehrensFisher => "behrens-fisher",
            Experiment::CiTest => "ci-test",
            Experiment::SigmaSweep => "sigma-sweep",
            Experiment::ValiditySuite => "validity-suite",
        }
    }
}

/// Test statistic for the two-group study, applied to originals and copies
/// alike (the t-tests use the matching one- or two-sided tail).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BfStatistic {
    /// mean(group 1) − mean(group 0): large values point at μ⁽⁰⁾ < μ⁽¹⁾.
    #[default]
    MeanDifference,
    /// |mean(group 0) − mean(group 1)|: two-sided alternative.
    AbsoluteMeanDifference,
}

/// Constants for the two-group study. γ values are variances.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BfSettings {
    pub n0: usize,
    pub n1: usize,
    pub mu0: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    /// How many leading first-group points are replaced by 3 + |Cauchy|.
    pub contaminated: usize,
    /// First-group observations kept by the trimmed estimator.
    pub keep: usize,
    /// Perturbation scale for the untrimmed sampler.
    pub sigma_mle: f64,
    /// Perturbation scale for the trimmed sampler.
    pub sigma_mtle: f64,
    pub statistic: BfStatistic,
}

impl Default for BfSettings {
    fn default() -> Self {
        Self {
            n0: 50,
            n1: 50,
            mu0: 0.0,
            gamma0: 1.0,
            gamma1: 2.0,
            contaminated: 5,
            keep: 45,
            sigma_mle: 5.0,
            sigma_mtle: 5.0,
            statistic: BfStatistic::default(),
        }
    }
}

/// Constants for the conditional-independence study.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CiSettings {
    pub n: usize,
    pub d: usize,
    pub nu: f64,
    /// Value of the leading coefficients of θ0.
    pub signal: f64,
    /// How many leading coefficients of θ0 (and of the Y regression) are
    /// nonzero.
    pub support: usize,
    /// Coefficient of each active Z column in the Y regression.
    pub y_coef: f64,
    /// Perturbation scale for the noise-augmented copies.
    pub sigma: f64,
    /// Unlabeled rows added for the sufficient-statistic mechanism, which
    /// needs more rows than columns.
    pub unlabeled: usize,
    pub group_size: usize,
    /// Sparsity budget for the hard-thresholding estimator.
    pub sparsity: usize,
    /// Lasso level for the Y-on-Z regression; None picks ν√(2n ln d).
    pub xi_lambda: Option<f64>,
    /// Penalty level for the X-on-Z estimators; None picks ν√(2n ln d).
    pub theta_lambda: Option<f64>,
}

impl Default for CiSettings {
    fn default() -> Self {
        Self {
            n: 50,
            d: 200,
            nu: 1.0,
            signal: 1.5,
            support: 5,
            y_coef: 0.2,
            sigma: 0.7,
            unlabeled: 200,
            group_size: 5,
            sparsity: 5,
            xi_lambda: None,
            theta_lambda: None,
        }
    }
}

fn default_replications() -> usize {
    500
}

fn default_alpha() -> f64 {
    0.1
}

/// One experiment, fully specified. Everything except `experiment` has a
/// default, so a minimal config is `{"experiment": "behrens-fisher"}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Method names; empty means the experiment's full default list.
    #[serde(default)]
    pub methods: Vec<String>,
    /// Copies per replication M where sampling is used; None picks a
    /// per-experiment default.
    #[serde(default)]
    pub copies: Option<usize>,
    /// Grid of second-group means (behrens-fisher).
    #[serde(default)]
    pub mu1_grid: Option<Vec<f64>>,
    /// Grid of coefficients β of X in the Y regression (ci-test).
    #[serde(default)]
    pub beta_grid: Option<Vec<f64>>,
    /// Grid of perturbation scales (sigma-sweep).
    #[serde(default)]
    pub sigma_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub behrens_fisher: BfSettings,
    #[serde(default)]
    pub ci_test: CiSettings,
    /// Where `emit` should write when driven from the CLI.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            replications: default_replications(),
            master_seed: 0,
            alpha: default_alpha(),
            methods: Vec::new(),
            copies: None,
            mu1_grid: None,
            beta_grid: None,
            sigma_grid: None,
            behrens_fisher: BfSettings::default(),
            ci_test: CiSettings::default(),
            output: None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Default method list for the configured experiment.
    pub fn default_methods(&self) -> Vec<String> {
        let names: &[&str] = match self.experiment {
            Experiment::BehrensFisher => &["acss-mle", "acss-mtle", "t-test", "oracle-t-test"],
            Experiment::CiTest => &[
                "oracle-crt",
                "css",
                "acss-lasso",
                "acss-scad",
                "acss-mcp",
                "acss-group-scad",
                "acss-iht",
                "debiased-lasso-baseline",
            ],
            Experiment::SigmaSweep => &["acss-lasso", "acss-mcp"],
            Experiment::ValiditySuite => &["oracle-unweighted", "oracle-weighted-ones", "css-crt"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    fn allowed_methods(&self) -> Vec<String> {
        match self.experiment {
            // The sweep accepts any of the estimator-based methods.
            Experiment::SigmaSweep => ["acss-lasso", "acss-scad", "acss-mcp", "acss-group-scad", "acss-iht"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            _ => self.default_methods(),
        }
    }

    pub fn effective_methods(&self) -> Vec<String> {
        if self.methods.is_empty() {
            self.default_methods()
        } else {
            self.methods.clone()
        }
    }

    /// The grid the experiment ranges over: μ⁽¹⁾, β, or σ. The validity
    /// suite has no free parameter and uses a single dummy point.
    pub fn effective_grid(&self) -> Vec<f64> {
        let tenths = |k: usize| -> Vec<f64> { (0..=k).map(|i| i as f64 / 10.0).collect() };
        match self.experiment {
            Experiment::BehrensFisher => self.mu1_grid.clone().unwrap_or_else(|| tenths(10)),
            Experiment::CiTest => self
                .beta_grid
                .clone()
                .unwrap_or_else(|| vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]),
            Experiment::SigmaSweep => self
                .sigma_grid
                .clone()
                .unwrap_or_else(|| vec![0.2, 0.5, 0.7, 1.0, 1.5]),
            Experiment::ValiditySuite => vec![0.0],
        }
    }

    pub fn effective_copies(&self) -> usize {
        self.copies.unwrap_or(match self.experiment {
            Experiment::BehrensFisher => 100,
            // Tail probabilities at the usual levels fall exactly on the
            // p-value grid k/100.
            Experiment::ValiditySuite => 99,
            // The remaining studies compute tail probabilities analytically.
            Experiment::CiTest | Experiment::SigmaSweep => 100,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        let allowed = self.allowed_methods();
        for m in &self.methods {
            if !allowed.contains(m) {
                return Err(Error::Config(format!(
                    "method {m:?} is not available for {}; choose among {allowed:?}",
                    self.experiment.id()
                )));
            }
        }
        if self.effective_grid().is_empty() {
            return Err(Error::Config("grid must be nonempty".into()));
        }
        if self.copies == Some(0) {
            return Err(Error::Config("copies must be positive".into()));
        }
        let bf = &self.behrens_fisher;
        if bf.n0 == 0 || bf.n1 == 0 {
            return Err(Error::Config("both groups need observations".into()));
        }
        if bf.contaminated > bf.n0 {
            return Err(Error::Config("cannot contaminate more points than the group holds".into()));
        }
        if bf.keep == 0 || bf.keep > bf.n0 {
            return Err(Error::Config(format!(
                "keep must lie in 1..={}, got {}",
                bf.n0, bf.keep
            )));
        }
        if !(bf.gamma0 > 0.0 && bf.gamma1 > 0.0) {
            return Err(Error::Config("group variances must be positive".into()));
        }
        if !(bf.sigma_mle > 0.0 && bf.sigma_mtle > 0.0) {
            return Err(Error::Config("perturbation scales must be positive".into()));
        }
        let ci = &self.ci_test;
        if ci.n == 0 || ci.d == 0 {
            return Err(Error::Config("the linear model needs rows and columns".into()));
        }
        if ci.support > ci.d {
            return Err(Error::Config("support cannot exceed the dimension".into()));
        }
        if !(ci.nu > 0.0) {
            return Err(Error::Config("nu must be positive".into()));
        }
        if !(ci.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if ci.sparsity == 0 || ci.sparsity > ci.d {
            return Err(Error::Config("sparsity must lie in 1..=d".into()));
        }
        if ci.group_size == 0 || ci.d % ci.group_size != 0 {
            return Err(Error::Config("group size must divide the dimension".into()));
        }
        Ok(())
    }
}

/// One replication's outcome. `pval` and `reject` are absent exactly when
/// `error` is present.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentRow {
    pub experiment: String,
    pub method: String,
    /// Grid point: μ⁽¹⁾, β, or σ depending on the experiment.
    pub grid: f64,
    pub rep: usize,
    pub seed: u64,
    pub pval: Option<f64>,
    pub reject: Option<bool>,
    pub error: Option<String>,
    /// Wall-clock runtime of this replication. The one column that is not a
    /// deterministic function of the config.
    pub ms: u64,
}

fn error_code(e: &Error) -> String {
    match e {
        Error::Dimension(_) => "dimension".into(),
        Error::Domain(_) => "domain".into(),
        Error::AtKnot { .. } => "at-knot".into(),
        Error::NoConvergence { .. } => "no-convergence".into(),
        Error::Singular(_) => "singular".into(),
        Error::Config(_) => "config".into(),
        Error::Io(_) => "io".into(),
    }
}

/// Execute the full grid × method × replication product. Rows come back
/// sorted by (method, grid, rep) regardless of scheduling.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ExperimentRow>> {
    config.validate()?;
    let methods = config.effective_methods();
    let grid = config.effective_grid();
    let mut jobs = Vec::with_capacity(methods.len() * grid.len() * config.replications);
    for method in &methods {
        for (gi, &g) in grid.iter().enumerate() {
            for rep in 0..config.replications {
                jobs.push((method.as_str(), gi, g, rep));
            }
        }
    }
    let mut rows: Vec<ExperimentRow> = jobs
        .into_par_iter()
        .map(|(method, gi, g, rep)| run_row(config, method, gi, g, rep))
        .collect();
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.grid.total_cmp(&b.grid))
            .then(a.rep.cmp(&b.rep))
    });
    Ok(rows)
}

fn run_row(config: &ExperimentConfig, method: &str, gi: usize, grid_value: f64, rep: usize) -> ExperimentRow {
    let experiment = config.experiment.id();
    let seed = seed::derive_seed(config.master_seed, experiment, method, gi, rep);
    let started = Instant::now();
    let outcome = replication_pvalue(config, method, grid_value, seed);
    let ms = started.elapsed().as_millis() as u64;
    match outcome {
        Ok(pval) => ExperimentRow {
            experiment: experiment.into(),
            method: method.into(),
            grid: grid_value,
            rep,
            seed,
            pval: Some(pval),
            reject: Some(pval <= config.alpha),
            error: None,
            ms,
        },
        Err(e) => ExperimentRow {
            experiment: experiment.into(),
            method: method.into(),
            grid: grid_value,
            rep,
            seed,
            pval: None,
            reject: None,
            error: Some(error_code(&e)),
            ms,
        },
    }
}

fn replication_pvalue(config: &ExperimentConfig, method: &str, grid_value: f64, seed: u64) -> Result<f64> {
    match config.experiment {
        Experiment::BehrensFisher => bf_pvalue(config, method, grid_value, seed),
        Experiment::CiTest => ci_pvalue(config, method, grid_value, config.ci_test.sigma, seed),
        Experiment::SigmaSweep => ci_pvalue(config, method, 0.0, grid_value, seed),
        Experiment::ValiditySuite => validity_pvalue(config, method, seed),
    }
}

// ---------------------------------------------------------------------------
// Two-group study
// ---------------------------------------------------------------------------

/// Sample the contaminated two-group data set: group 0 is N(μ⁰, γ⁰) with its
/// first `contaminated` points replaced by 3 + |Cauchy|, group 1 is N(μ¹, γ¹).
fn bf_sample(settings: &BfSettings, mu1: f64, rng: &mut impl Rng) -> DVector<f64> {
    let cauchy = Cauchy::new(0.0, 1.0).expect("unit Cauchy");
    let mut x = DVector::zeros(settings.n0 + settings.n1);
    let (sd0, sd1) = (settings.gamma0.sqrt(), settings.gamma1.sqrt());
    for i in 0..settings.n0 {
        x[i] = if i < settings.contaminated {
            3.0 + rng.sample::<f64, _>(cauchy).abs()
        } else {
            settings.mu0 + sd0 * rng.sample::<f64, _>(StandardNormal)
        };
    }
    for i in 0..settings.n1 {
        x[settings.n0 + i] = mu1 + sd1 * rng.sample::<f64, _>(StandardNormal);
    }
    x
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|&v| (v - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Two-sample t-test without the equal-variance assumption (Welch's
/// approximation for the degrees of freedom). One-sided against
/// mean(x1) > mean(x0), or two-sided, to match the chosen statistic.
pub fn welch_pvalue(x0: &[f64], x1: &[f64], statistic: BfStatistic) -> Result<f64> {
    if x0.len() < 2 || x1.len() < 2 {
        return Err(Error::Dimension("each group needs at least two observations".into()));
    }
    let (n0, n1) = (x0.len() as f64, x1.len() as f64);
    let (v0, v1) = (sample_variance(x0), sample_variance(x1));
    let se2 = v0 / n0 + v1 / n1;
    if se2 <= 0.0 {
        // Both groups constant: no evidence either way.
        return Ok(1.0);
    }
    let t = (mean(x1) - mean(x0)) / se2.sqrt();
    let df = se2 * se2 / ((v0 / n0).powi(2) / (n0 - 1.0) + (v1 / n1).powi(2) / (n1 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Domain(format!("t distribution with df {df}: {e}")))?;
    Ok(match statistic {
        BfStatistic::MeanDifference => dist.sf(t),
        BfStatistic::AbsoluteMeanDifference => (2.0 * dist.sf(t.abs())).min(1.0),
    })
}

fn bf_pvalue(config: &ExperimentConfig, method: &str, mu1: f64, seed: u64) -> Result<f64> {
    let s = &config.behrens_fisher;
    let mut rng = seed::rng_from(seed);
    let x = bf_sample(s, mu1, &mut rng);
    let xs = x.as_slice();
    let (g0, g1) = (&xs[..s.n0], &xs[s.n0..]);
    match method {
        "t-test" => welch_pvalue(g0, g1, s.statistic),
        "oracle-t-test" => welch_pvalue(&g0[s.contaminated..], g1, s.statistic),
        "acss-mle" | "acss-mtle" => {
            let model = BehrensFisher::new(s.n0, s.n1)?;
            let (estimator, sigma) = if method == "acss-mle" {
                (EstimatorSpec::PenalizedMle { penalty: Penalty::none(3) }, s.sigma_mle)
            } else {
                (EstimatorSpec::Mtle { h: s.keep }, s.sigma_mtle)
            };
            let acss = AcssConfig {
                estimator,
                proposal: ProposalSpec::SphereVmf,
                sigma,
                m: config.effective_copies(),
                solver: SolverOptions::default(),
            };
            let out = sampler::run_acss(&model, &x, &acss, &mut rng)?;
            let statistic = s.statistic;
            let stat = move |v: &DVector<f64>| -> f64 {
                let vs = v.as_slice();
                let diff = mean(&vs[s.n0..]) - mean(&vs[..s.n0]);
                match statistic {
                    BfStatistic::MeanDifference => diff,
                    BfStatistic::AbsoluteMeanDifference => diff.abs(),
                }
            };
            let t_copies: Vec<f64> = out.copy_set.copies.iter().map(&stat).collect();
            sampler::pval_weighted(stat(&x), &t_copies, &out.copy_set.log_weights)
        }
        other => Err(Error::Config(format!("unknown method {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Conditional-independence study
// ---------------------------------------------------------------------------

struct CiData {
    problem: CrtProblem,
    theta0: DVector<f64>,
}

/// Sample the conditional-independence instance: Z has i.i.d. standard
/// normal entries, X = Zθ0 + νε, and Y regresses on X and the active Z
/// columns. `unlabeled` extra (X, Z) rows are attached when the method
/// needs a tall design.
fn ci_sample(s: &CiSettings, beta: f64, unlabeled: usize, rng: &mut impl Rng) -> Result<CiData> {
    let normal = |rng: &mut dyn rand::RngCore, len: usize| -> DVector<f64> {
        DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
    };
    let mut theta0 = DVector::zeros(s.d);
    for j in 0..s.support {
        theta0[j] = s.signal;
    }
    let z = DMatrix::from_fn(s.n, s.d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = &z * &theta0 + s.nu * normal(rng, s.n);
    let mut y = normal(rng, s.n);
    for i in 0..s.n {
        let mut m = beta * x[i];
        for j in 0..s.support {
            m += s.y_coef * z[(i, j)];
        }
        y[i] += m;
    }
    let mut problem = CrtProblem::new(x, y, z, s.nu)?;
    if unlabeled > 0 {
        let z_u = DMatrix::from_fn(unlabeled, s.d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x_u = &z_u * &theta0 + s.nu * normal(rng, unlabeled);
        problem = problem.with_unlabeled(x_u, z_u)?;
    }
    Ok(CiData { problem, theta0 })
}

fn universal_lambda(n: usize, d: usize, nu: f64) -> f64 {
    nu * (2.0 * n as f64 * (d as f64).ln()).sqrt()
}

fn ci_pvalue(config: &ExperimentConfig, method: &str, beta: f64, sigma: f64, seed: u64) -> Result<f64> {
    let s = &config.ci_test;
    let mut rng = seed::rng_from(seed);
    let unlabeled = if method == "css" { s.unlabeled } else { 0 };
    let data = ci_sample(s, beta, unlabeled, &mut rng)?;
    let lambda = s.theta_lambda.unwrap_or_else(|| universal_lambda(s.n, s.d, s.nu));
    let xi_lambda = s.xi_lambda.unwrap_or_else(|| universal_lambda(s.n, s.d, 1.0));

    if method == "debiased-lasso-baseline" {
        return crt::debiased_lasso_pvalue(
            &data.problem,
            Some(xi_lambda),
            Some(lambda),
            &SolverOptions::default(),
        );
    }

    let (mechanism, estimator) = match method {
        "oracle-crt" => (CrtMechanism::AcssGaussian, CrtEstimator::Oracle(data.theta0.clone())),
        "css" => (CrtMechanism::Css, CrtEstimator::Ols),
        "acss-lasso" => (CrtMechanism::AcssGaussian, CrtEstimator::Lasso { lambda }),
        "acss-scad" => (CrtMechanism::AcssGaussian, CrtEstimator::Scad { lambda, a: 3.7 }),
        "acss-mcp" => (CrtMechanism::AcssGaussian, CrtEstimator::Mcp { lambda, gamma: 3.0 }),
        "acss-group-scad" => (
            CrtMechanism::AcssGaussian,
            CrtEstimator::GroupScad {
                lambda: lambda * (s.group_size as f64).sqrt(),
                a: 3.7,
                group_size: s.group_size,
            },
        ),
        "acss-iht" => (CrtMechanism::AcssGaussian, CrtEstimator::Iht { k: s.sparsity }),
        other => return Err(Error::Config(format!("unknown method {other:?}"))),
    };
    let mut crt_config = CrtConfig::new(mechanism, estimator, sigma);
    crt_config.xi_lambda = Some(xi_lambda);
    crt_config.side = Side::Upper;
    Ok(crt::run_crt(&data.problem, &crt_config, &mut rng)?.pval)
}

// ---------------------------------------------------------------------------
// Exactness suite
// ---------------------------------------------------------------------------

/// P-values that are super-uniform by construction: copies drawn from the
/// fully known null law (no estimation), and a sufficient-statistic CRT.
fn validity_pvalue(config: &ExperimentConfig, method: &str, seed: u64) -> Result<f64> {
    let mut rng = seed::rng_from(seed);
    let m = config.effective_copies();
    match method {
        "oracle-unweighted" | "oracle-weighted-ones" => {
            let model = GaussianLinear::new(DMatrix::from_element(6, 1, 1.0), 1.0)?;
            let theta0 = DVector::from_element(1, 0.3);
            let x = model.sample_data(&theta0, &mut rng)?;
            let acss = AcssConfig {
                estimator: EstimatorSpec::Oracle { theta0 },
                proposal: ProposalSpec::IidModel,
                sigma: 1.0,
                m,
                solver: SolverOptions::default(),
            };
            let out = sampler::run_acss(&model, &x, &acss, &mut rng)?;
            let stat = |v: &DVector<f64>| v.sum().abs();
            let t_copies: Vec<f64> = out.copy_set.copies.iter().map(&stat).collect();
            if method == "oracle-unweighted" {
                Ok(sampler::pval_unweighted(stat(&x), &t_copies))
            } else {
                sampler::pval_weighted(stat(&x), &t_copies, &vec![0.0; m + 1])
            }
        }
        "css-crt" => {
            let (n, d) = (20, 3);
            let z = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let theta0 = DVector::from_column_slice(&[1.0, -0.5, 0.25]);
            let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &z * &theta0 + noise;
            let mut y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            for i in 0..n {
                y[i] += 0.4 * z[(i, 0)];
            }
            let problem = CrtProblem::new(x, y, z, 1.0)?;
            let mut crt_config = CrtConfig::new(CrtMechanism::Css, CrtEstimator::Ols, 1.0);
            crt_config.m = Some(m);
            crt_config.xi_lambda = Some(universal_lambda(n, d, 1.0));
            Ok(crt::run_crt(&problem, &crt_config, &mut rng)?.pval)
        }
        other => Err(Error::Config(format!("unknown method {other:?}"))),
    }
}

/// One super-uniformity assertion: the rejection rate of a method at a level
/// α, compared against α plus two binomial standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct ValidityCheck {
    pub method: String,
    pub alpha: f64,
    pub rate: f64,
    pub bound: f64,
    pub reps: usize,
    pub errors: usize,
    pub passed: bool,
}

/// Evaluate super-uniformity of each method's p-values at several levels.
/// A method with any errored rows fails outright.
pub fn validity_checks(rows: &[ExperimentRow], alphas: &[f64]) -> Vec<ValidityCheck> {
    let mut by_method: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for row in rows {
        let entry = by_method.entry(row.method.as_str()).or_default();
        match row.pval {
            Some(p) => entry.0.push(p),
            None => entry.1 += 1,
        }
    }
    let mut checks = Vec::new();
    for (method, (pvals, errors)) in &by_method {
        for &alpha in alphas {
            let reps = pvals.len();
            let rate = if reps == 0 {
                f64::NAN
            } else {
                pvals.iter().filter(|&&p| p <= alpha).count() as f64 / reps as f64
            };
            let bound = alpha + 2.0 * (alpha * (1.0 - alpha) / reps.max(1) as f64).sqrt();
            checks.push(ValidityCheck {
                method: method.to_string(),
                alpha,
                rate,
                bound,
                reps,
                errors: *errors,
                passed: *errors == 0 && reps > 0 && rate <= bound,
            });
        }
    }
    checks
}

// ---------------------------------------------------------------------------
// Summaries and emission
// ---------------------------------------------------------------------------

/// Rejection rate of one method at one grid point.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SummaryRow {
    pub experiment: String,
    pub method: String,
    pub grid: f64,
    /// Replications that produced a p-value.
    pub reps: usize,
    pub errors: usize,
    pub rate: f64,
    /// Binomial standard error √(p(1−p)/reps).
    pub se: f64,
}

/// Rejection rates at level `alpha`, grouped by method × grid point. Error
/// rows count toward `errors` and are excluded from the rate.
pub fn summarize(rows: &[ExperimentRow], alpha: f64) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, u64), (usize, usize, usize)> = BTreeMap::new();
    for row in rows {
        let key = (row.experiment.clone(), row.method.clone(), row.grid.to_bits());
        let entry = groups.entry(key).or_default();
        match row.pval {
            Some(p) => {
                entry.0 += 1;
                if p <= alpha {
                    entry.1 += 1;
                }
            }
            None => entry.2 += 1,
        }
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((experiment, method, bits), (reps, hits, errors))| {
            let rate = if reps == 0 { f64::NAN } else { hits as f64 / reps as f64 };
            let se = if reps == 0 { f64::NAN } else { (rate * (1.0 - rate) / reps as f64).sqrt() };
            SummaryRow { experiment, method, grid: f64::from_bits(bits), reps, errors, rate, se }
        })
        .collect();
    out.sort_by(|a, b| {
        a.experiment
            .cmp(&b.experiment)
            .then(a.method.cmp(&b.method))
            .then(a.grid.total_cmp(&b.grid))
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
    SvgLines,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg-lines" => Ok(Self::SvgLines),
            other => Err(Error::Config(format!(
                "unknown format {other:?}; choose csv, json, or svg-lines"
            ))),
        }
    }
}

/// Serialize rows as CSV with the fixed column set
/// `experiment,method,grid,rep,seed,pval,reject,error,ms`.
pub fn rows_to_csv(rows: &[ExperimentRow]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        // serde only emits headers alongside the first record, so write the
        // header line explicitly for empty tables.
        writer
            .write_record(["experiment", "method", "grid", "rep", "seed", "pval", "reject", "error", "ms"])
            .map_err(|e| Error::Config(format!("csv write: {e}")))?;
    }
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Config(format!("csv write: {e}")))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Config(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv encoding: {e}")))
}

/// Parse rows back from `rows_to_csv` output.
pub fn rows_from_csv(text: &str) -> Result<Vec<ExperimentRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record.map_err(|e| Error::Config(format!("csv parse: {e}")))?);
    }
    Ok(rows)
}

pub fn rows_to_json(rows: &[ExperimentRow]) -> Result<String> {
    serde_json::to_string_pretty(rows).map_err(|e| Error::Config(format!("json write: {e}")))
}

const SVG_PALETTE: [&str; 8] = [
    "#4269d0", "#efb118", "#ff725c", "#6cc5b0", "#3ca951", "#ff8ab7", "#a463f2", "#97bbf5",
];

/// Render a summary table as an SVG line chart: one polyline per method over
/// the grid, vertical ±2 SE whiskers, and a dashed reference line at `alpha`.
pub fn svg_lines(table: &[SummaryRow], alpha: f64) -> String {
    let (width, height) = (720.0, 460.0);
    let (ml, mr, mt, mb) = (64.0, 160.0, 20.0, 48.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);

    let mut methods: Vec<&str> = Vec::new();
    let mut grid_values: Vec<f64> = Vec::new();
    for row in table {
        if !methods.contains(&row.method.as_str()) {
            methods.push(&row.method);
        }
        if !grid_values.iter().any(|&g| g == row.grid) {
            grid_values.push(row.grid);
        }
    }
    grid_values.sort_by(f64::total_cmp);
    let (x0, x1) = match (grid_values.first(), grid_values.last()) {
        (Some(&a), Some(&b)) if a < b => (a, b),
        (Some(&a), _) => (a - 0.5, a + 0.5),
        _ => (0.0, 1.0),
    };
    let px = |g: f64| ml + (g - x0) / (x1 - x0) * pw;
    let py = |rate: f64| mt + (1.0 - rate.clamp(0.0, 1.0)) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));

    for k in 0..=5 {
        let r = k as f64 / 5.0;
        let y = py(r);
        svg.push_str(&format!(
            "  <line x1=\"{ml}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#e0e0e0\"/>\n",
            ml + pw
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{r:.1}</text>\n",
            ml - 8.0,
            y + 4.0
        ));
    }
    for &g in &grid_values {
        let x = px(g);
        svg.push_str(&format!(
            "  <line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#b0b0b0\"/>\n",
            mt + ph,
            mt + ph + 5.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{g}</text>\n",
            mt + ph + 20.0
        ));
    }
    svg.push_str(&format!(
        "  <rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#606060\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">rejection rate</text>\n",
        16.0,
        mt + ph / 2.0
    ));

    let ya = py(alpha);
    svg.push_str(&format!(
        "  <line x1=\"{ml}\" y1=\"{ya:.1}\" x2=\"{:.1}\" y2=\"{ya:.1}\" stroke=\"#303030\" \
         stroke-dasharray=\"6 4\"/>\n",
        ml + pw
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\">α = {alpha}</text>\n",
        ml + pw + 6.0,
        ya + 4.0
    ));

    for (mi, method) in methods.iter().enumerate() {
        let color = SVG_PALETTE[mi % SVG_PALETTE.len()];
        let mut pts: Vec<&SummaryRow> = table.iter().filter(|r| r.method == *method).collect();
        pts.sort_by(|a, b| a.grid.total_cmp(&b.grid));
        let path: Vec<String> = pts
            .iter()
            .filter(|r| r.rate.is_finite())
            .map(|r| format!("{:.1},{:.1}", px(r.grid), py(r.rate)))
            .collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            path.join(" ")
        ));
        for r in &pts {
            if !r.rate.is_finite() {
                continue;
            }
            let (x, y) = (px(r.grid), py(r.rate));
            svg.push_str(&format!(
                "  <line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/>\n",
                py(r.rate - 2.0 * r.se),
                py(r.rate + 2.0 * r.se)
            ));
            svg.push_str(&format!(
                "  <circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"2.6\" fill=\"{color}\"/>\n"
            ));
        }
        let ly = mt + 14.0 + 18.0 * mi as f64;
        svg.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" \
             stroke-width=\"1.8\"/>\n",
            ml + pw + 8.0,
            ml + pw + 28.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\">{method}</text>\n",
            ml + pw + 34.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write rows (csv, json) or their summary chart (svg-lines) to `path`.
pub fn emit(rows: &[ExperimentRow], alpha: f64, format: OutputFormat, path: &Path) -> Result<()> {
    let content = match format {
        OutputFormat::Csv => rows_to_csv(rows)?,
        OutputFormat::Json => rows_to_json(rows)?,
        OutputFormat::SvgLines => svg_lines(&summarize(rows, alpha), alpha),
    };
    std::fs::write(path, content)
        .map_err(|e| Error::Config(format!("writing {}: {e}", path.display())))
}
