//! Group-wise penalties Σ_j ρ_j(‖θ_{G_j}‖) with exact proximal operators.
//!
//! Each group carries a scalar penalty ρ applied to the group's Euclidean
//! norm: `l1` (singleton groups) and `group-l2` share the linear ρ(t) = λt,
//! SCAD and MCP are the standard nonconvex forms. A ridge term τ‖θ‖² is kept
//! separate as the smooth part of the objective (it contributes curvature,
//! not sparsity). Proximal steps for the nonconvex kinds are computed by
//! exact minimization over the finitely many piecewise-stationary candidates,
//! with ties broken toward larger magnitude.

use nalgebra::DVector;

use crate::{Error, Result};

/// Scalar penalty on a group norm, t ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rho {
    /// No penalty on the group.
    None,
    /// ρ(t) = λt: the l1 / group-lasso penalty.
    L1 { lambda: f64 },
    /// SCAD with the usual two knots at λ and aλ; requires a > 2.
    Scad { lambda: f64, a: f64 },
    /// MCP with knot at γλ; requires γ > 1.
    Mcp { lambda: f64, gamma: f64 },
}

impl Rho {
    pub fn value(&self, t: f64) -> f64 {
        debug_assert!(t >= 0.0);
        match *self {
            Rho::None => 0.0,
            Rho::L1 { lambda } => lambda * t,
            Rho::Scad { lambda, a } => {
                if t <= lambda {
                    lambda * t
                } else if t <= a * lambda {
                    (2.0 * a * lambda * t - t * t - lambda * lambda) / (2.0 * (a - 1.0))
                } else {
                    0.5 * (a + 1.0) * lambda * lambda
                }
            }
            Rho::Mcp { lambda, gamma } => {
                if t <= gamma * lambda {
                    lambda * t - t * t / (2.0 * gamma)
                } else {
                    0.5 * gamma * lambda * lambda
                }
            }
        }
    }

    /// Right derivative at 0 and the usual derivative elsewhere.
    pub fn prime(&self, t: f64) -> f64 {
        debug_assert!(t >= 0.0);
        match *self {
            Rho::None => 0.0,
            Rho::L1 { lambda } => lambda,
            Rho::Scad { lambda, a } => {
                if t <= lambda {
                    lambda
                } else {
                    (a * lambda - t).max(0.0) / (a - 1.0)
                }
            }
            Rho::Mcp { lambda, gamma } => (lambda - t / gamma).max(0.0),
        }
    }

    /// Points where ρ″ does not exist.
    pub fn knots(&self) -> Vec<f64> {
        match *self {
            Rho::None | Rho::L1 { .. } => vec![],
            Rho::Scad { lambda, a } => vec![lambda, a * lambda],
            Rho::Mcp { lambda, gamma } => vec![gamma * lambda],
        }
    }

    /// Second derivative at t > 0; errs exactly at a knot.
    pub fn second(&self, t: f64) -> Result<f64> {
        if t <= 0.0 {
            return Err(Error::Domain(format!("rho'' needs t > 0, got {t}")));
        }
        if self.knots().iter().any(|&k| k == t) {
            return Err(Error::AtKnot { t });
        }
        Ok(match *self {
            Rho::None | Rho::L1 { .. } => 0.0,
            Rho::Scad { lambda, a } => {
                if t < lambda || t > a * lambda {
                    0.0
                } else {
                    -1.0 / (a - 1.0)
                }
            }
            Rho::Mcp { lambda, gamma } => {
                if t < gamma * lambda {
                    -1.0 / gamma
                } else {
                    0.0
                }
            }
        })
    }

    pub fn is_near_knot(&self, t: f64, tol: f64) -> bool {
        self.knots().iter().any(|&k| (t - k).abs() <= tol)
    }

    /// argmin_{u ≥ 0} ½(u − t)² + step·ρ(u), ties broken toward larger u.
    pub fn prox_scalar(&self, t: f64, step: f64) -> f64 {
        debug_assert!(t >= 0.0 && step > 0.0);
        match *self {
            Rho::None => t,
            Rho::L1 { lambda } => (t - step * lambda).max(0.0),
            Rho::Scad { lambda, a } => {
                let mut cands = vec![0.0, lambda, a * lambda];
                cands.push((t - step * lambda).clamp(0.0, lambda));
                let denom = a - 1.0 - step;
                if denom.abs() > 1e-14 {
                    let u = (t * (a - 1.0) - step * a * lambda) / denom;
                    if u > lambda && u < a * lambda {
                        cands.push(u);
                    }
                }
                if t > a * lambda {
                    cands.push(t);
                }
                best_prox_candidate(self, t, step, &cands)
            }
            Rho::Mcp { lambda, gamma } => {
                let mut cands = vec![0.0, gamma * lambda];
                if (gamma - step).abs() > 1e-14 {
                    let u = gamma * (t - step * lambda) / (gamma - step);
                    if u > 0.0 && u < gamma * lambda {
                        cands.push(u);
                    }
                }
                if t > gamma * lambda {
                    cands.push(t);
                }
                best_prox_candidate(self, t, step, &cands)
            }
        }
    }
}

fn best_prox_candidate(rho: &Rho, t: f64, step: f64, cands: &[f64]) -> f64 {
    let obj = |u: f64| 0.5 * (u - t) * (u - t) + step * rho.value(u);
    let mut best = cands[0];
    let mut best_val = obj(best);
    for &u in &cands[1..] {
        let v = obj(u);
        if v < best_val - 1e-15 || (v <= best_val + 1e-15 && u > best) {
            best = u;
            best_val = v;
        }
    }
    best
}

/// One penalized group: coordinate indices plus its scalar penalty.
#[derive(Debug, Clone)]
pub struct Group {
    pub idx: Vec<usize>,
    pub rho: Rho,
}

/// Active/inactive split of the groups at a given θ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSets {
    /// Indices (into the group list) of groups with ‖θ_G‖ > tol.
    pub active: Vec<usize>,
    /// Union of the coordinates of the active groups, sorted.
    pub support: Vec<usize>,
}

/// Full penalty: a partition of the coordinates into penalized groups plus an
/// optional smooth ridge term τ‖θ‖².
#[derive(Debug, Clone)]
pub struct Penalty {
    groups: Vec<Group>,
    ridge: f64,
    dim: usize,
}

impl Penalty {
    pub fn new(groups: Vec<Group>, ridge: f64, dim: usize) -> Result<Self> {
        let mut seen = vec![false; dim];
        for g in &groups {
            if g.idx.is_empty() {
                return Err(Error::Config("empty penalty group".into()));
            }
            for &i in &g.idx {
                if i >= dim || seen[i] {
                    return Err(Error::Config(format!(
                        "group indices must partition 0..{dim}; index {i} repeated or out of range"
                    )));
                }
                seen[i] = true;
            }
            match g.rho {
                Rho::None => {}
                Rho::L1 { lambda } => {
                    if !(lambda > 0.0) {
                        return Err(Error::Config("l1 lambda must be positive".into()));
                    }
                }
                Rho::Scad { lambda, a } => {
                    if !(lambda > 0.0) || !(a > 2.0) {
                        return Err(Error::Config("scad needs lambda > 0 and a > 2".into()));
                    }
                }
                Rho::Mcp { lambda, gamma } => {
                    if !(lambda > 0.0) || !(gamma > 1.0) {
                        return Err(Error::Config("mcp needs lambda > 0 and gamma > 1".into()));
                    }
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Config("groups must cover every coordinate".into()));
        }
        if !(ridge >= 0.0) {
            return Err(Error::Config("ridge coefficient must be nonnegative".into()));
        }
        Ok(Self { groups, ridge, dim })
    }

    /// No penalty at all: a single unpenalized group over all coordinates.
    pub fn none(dim: usize) -> Self {
        Self::new(vec![Group { idx: (0..dim).collect(), rho: Rho::None }], 0.0, dim).unwrap()
    }

    /// Pure ridge τ‖θ‖² (smooth; no sparsity groups).
    pub fn ridge(tau: f64, dim: usize) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config("ridge tau must be positive".into()));
        }
        Self::new(vec![Group { idx: (0..dim).collect(), rho: Rho::None }], tau, dim)
    }

    /// λ‖θ‖₁ via singleton groups.
    pub fn l1(lambda: f64, dim: usize) -> Result<Self> {
        Self::new(singleton_groups(dim, Rho::L1 { lambda }), 0.0, dim)
    }

    /// λ·Σ‖θ_G‖ over the given partition.
    pub fn group_l2(lambda: f64, groups: Vec<Vec<usize>>, dim: usize) -> Result<Self> {
        let gs = groups.into_iter().map(|idx| Group { idx, rho: Rho::L1 { lambda } }).collect();
        Self::new(gs, 0.0, dim)
    }

    pub fn scad(lambda: f64, a: f64, dim: usize) -> Result<Self> {
        Self::new(singleton_groups(dim, Rho::Scad { lambda, a }), 0.0, dim)
    }

    pub fn mcp(lambda: f64, gamma: f64, dim: usize) -> Result<Self> {
        Self::new(singleton_groups(dim, Rho::Mcp { lambda, gamma }), 0.0, dim)
    }

    pub fn group_scad(lambda: f64, a: f64, groups: Vec<Vec<usize>>, dim: usize) -> Result<Self> {
        let gs = groups.into_iter().map(|idx| Group { idx, rho: Rho::Scad { lambda, a } }).collect();
        Self::new(gs, 0.0, dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn ridge_coeff(&self) -> f64 {
        self.ridge
    }

    /// Whether any group actually penalizes (ρ not None).
    pub fn has_nonsmooth_part(&self) -> bool {
        self.groups.iter().any(|g| g.rho != Rho::None)
    }

    pub fn group_norm(&self, j: usize, theta: &DVector<f64>) -> f64 {
        self.groups[j].idx.iter().map(|&i| theta[i] * theta[i]).sum::<f64>().sqrt()
    }

    /// Σ_j ρ_j(‖θ_G‖); the ridge part is not included (it belongs to the
    /// smooth objective).
    pub fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        self.check_dim(theta)?;
        Ok(self
            .groups
            .iter()
            .enumerate()
            .map(|(j, g)| g.rho.value(self.group_norm(j, theta)))
            .sum())
    }

    /// Smooth ridge value τ‖θ‖².
    pub fn smooth_value(&self, theta: &DVector<f64>) -> f64 {
        self.ridge * theta.norm_squared()
    }

    /// Gradient of the smooth ridge part, 2τθ.
    pub fn smooth_gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        theta * (2.0 * self.ridge)
    }

    pub fn rho_prime(&self, j: usize, t: f64) -> f64 {
        self.groups[j].rho.prime(t)
    }

    pub fn rho_second(&self, j: usize, t: f64) -> Result<f64> {
        self.groups[j].rho.second(t)
    }

    /// Blockwise prox of the group penalty at v with the given step. The
    /// ridge part is handled too (prox of step·τ‖u‖² is a rescale), so the
    /// result is exact for every constructor of this type.
    pub fn prox(&self, v: &DVector<f64>, step: f64) -> Result<DVector<f64>> {
        self.check_dim(v)?;
        let mut out = v.clone();
        if self.ridge > 0.0 {
            out /= 1.0 + 2.0 * step * self.ridge;
        }
        for (j, g) in self.groups.iter().enumerate() {
            if g.rho == Rho::None {
                continue;
            }
            let block = DVector::from_iterator(g.idx.len(), g.idx.iter().map(|&i| out[i]));
            let t = block.norm();
            let u = g.rho.prox_scalar(t, step);
            let scale = if t > 0.0 { u / t } else { 0.0 };
            for &i in &g.idx {
                out[i] *= scale;
            }
            let _ = j;
        }
        Ok(out)
    }

    /// Groups with ‖θ_G‖ > tol and the union of their coordinates.
    pub fn active_sets(&self, theta: &DVector<f64>, tol: f64) -> Result<ActiveSets> {
        self.check_dim(theta)?;
        let mut active = Vec::new();
        let mut support = Vec::new();
        for (j, g) in self.groups.iter().enumerate() {
            if self.group_norm(j, theta) > tol {
                active.push(j);
                support.extend_from_slice(&g.idx);
            }
        }
        support.sort_unstable();
        Ok(ActiveSets { active, support })
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension(format!(
                "vector has length {}, penalty covers {} coordinates",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// Default active-set tolerance: prox produces exact zeros, so this only
/// guards accumulated floating-point drift.
pub const ACTIVE_TOL: f64 = 1e-8;

fn singleton_groups(dim: usize, rho: Rho) -> Vec<Group> {
    (0..dim).map(|i| Group { idx: vec![i], rho }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::grid_argmin;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn penalty_values_match_closed_forms() {
        let l1 = Penalty::l1(1.0, 2).unwrap();
        let theta = DVector::from_row_slice(&[2.0, -3.0]);
        assert_relative_eq!(l1.value(&theta).unwrap(), 5.0);

        let gl = Penalty::group_l2(2.0, vec![vec![0, 1]], 2).unwrap();
        let v = DVector::from_row_slice(&[3.0, 4.0]);
        assert_relative_eq!(gl.value(&v).unwrap(), 10.0);

        let scad = Rho::Scad { lambda: 1.0, a: 3.7 };
        assert_relative_eq!(scad.value(10.0), 2.35, epsilon = 1e-12);

        assert_relative_eq!(Penalty::none(3).value(&DVector::zeros(3)).unwrap(), 0.0);
    }

    #[test]
    fn derivative_values_match_standard_forms() {
        let mcp = Rho::Mcp { lambda: 1.0, gamma: 3.0 };
        assert_relative_eq!(mcp.prime(2.0), 1.0 / 3.0);
        assert_relative_eq!(mcp.second(2.0).unwrap(), -1.0 / 3.0);

        let scad = Rho::Scad { lambda: 1.0, a: 3.7 };
        assert_relative_eq!(scad.prime(0.5), 1.0);
        assert_relative_eq!(scad.prime(2.0), 1.7 / 2.7, epsilon = 1e-12);

        // SCAD and MCP behave like l1 up to λ.
        for t in [0.0, 0.3, 0.9] {
            assert_relative_eq!(scad.prime(t), 1.0);
        }
        assert_relative_eq!(mcp.prime(0.0), 1.0);
    }

    #[test]
    fn rho_second_errors_exactly_at_knots() {
        let scad = Rho::Scad { lambda: 1.0, a: 3.7 };
        assert!(matches!(scad.second(1.0), Err(crate::Error::AtKnot { .. })));
        assert!(matches!(scad.second(3.7), Err(crate::Error::AtKnot { .. })));
        assert!(scad.second(1.0 + 1e-9).is_ok());
        let mcp = Rho::Mcp { lambda: 0.5, gamma: 3.0 };
        assert!(matches!(mcp.second(1.5), Err(crate::Error::AtKnot { .. })));
        assert!(mcp.is_near_knot(1.5 + 1e-10, 1e-9));
    }

    #[test]
    fn rho_prime_matches_finite_differences_off_knots() {
        let kinds = [
            Rho::L1 { lambda: 0.7 },
            Rho::Scad { lambda: 1.2, a: 3.7 },
            Rho::Mcp { lambda: 0.9, gamma: 3.0 },
        ];
        let h = 1e-7;
        for rho in kinds {
            for &t in &[0.05, 0.5, 2.0, 3.3, 6.0, 11.0] {
                if rho.is_near_knot(t, 2.0 * h) {
                    continue;
                }
                let fd = (rho.value(t + h) - rho.value(t - h)) / (2.0 * h);
                assert_relative_eq!(rho.prime(t), fd, max_relative = 1e-6, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn prox_frozen_examples() {
        let l1 = Penalty::l1(1.0, 1).unwrap();
        let out = l1.prox(&DVector::from_row_slice(&[3.0]), 1.0).unwrap();
        assert_relative_eq!(out[0], 2.0, epsilon = 1e-12);

        let gl = Penalty::group_l2(2.5, vec![vec![0, 1]], 2).unwrap();
        let out = gl.prox(&DVector::from_row_slice(&[3.0, 4.0]), 1.0).unwrap();
        assert_relative_eq!(out[0], 1.5, epsilon = 1e-12);
        assert_relative_eq!(out[1], 2.0, epsilon = 1e-12);

        let mcp = Rho::Mcp { lambda: 1.0, gamma: 3.0 };
        assert_relative_eq!(mcp.prox_scalar(10.0, 1.0), 10.0, epsilon = 1e-12);

        let ridge = Penalty::ridge(0.5, 1).unwrap();
        let out = ridge.prox(&DVector::from_row_slice(&[4.0]), 1.0).unwrap();
        assert_relative_eq!(out[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn prox_beats_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for trial in 0..500 {
            let rho = match trial % 3 {
                0 => Rho::L1 { lambda: rng.gen_range(0.1..3.0) },
                1 => Rho::Scad { lambda: rng.gen_range(0.1..2.0), a: rng.gen_range(2.1..6.0) },
                _ => Rho::Mcp { lambda: rng.gen_range(0.1..2.0), gamma: rng.gen_range(1.1..6.0) },
            };
            let t = rng.gen_range(0.0..8.0);
            let step = rng.gen_range(0.05..2.5);
            let u = rho.prox_scalar(t, step);
            let obj = |v: f64| 0.5 * (v - t) * (v - t) + step * rho.value(v);
            let (_, grid_best) = grid_argmin(obj, 0.0, t + 1.0, 10_000);
            assert!(
                obj(u) <= grid_best + 1e-9,
                "prox {u} worse than grid: {} vs {} ({rho:?}, t={t}, step={step})",
                obj(u),
                grid_best
            );
        }
    }

    #[test]
    fn convex_prox_is_a_contraction() {
        let l1 = Rho::L1 { lambda: 1.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let (a, b) = (rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0));
            let s = rng.gen_range(0.1..2.0);
            assert!((l1.prox_scalar(a, s) - l1.prox_scalar(b, s)).abs() <= (a - b).abs() + 1e-12);
        }
    }

    #[test]
    fn active_set_examples() {
        let p = Penalty::l1(1.0, 3).unwrap();
        let zero = p.active_sets(&DVector::zeros(3), 1e-10).unwrap();
        assert!(zero.active.is_empty() && zero.support.is_empty());

        let theta = DVector::from_row_slice(&[0.0, 1e-12, 5.0]);
        let a = p.active_sets(&theta, 1e-10).unwrap();
        assert_eq!(a.active, vec![2]);
        assert_eq!(a.support, vec![2]);

        let grouped = Penalty::group_l2(1.0, vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let theta = DVector::from_row_slice(&[0.0, 0.0, 1.0, 0.0]);
        let a = grouped.active_sets(&theta, 0.0).unwrap();
        assert_eq!(a.active, vec![1]);
        assert_eq!(a.support, vec![2, 3]);
    }

    #[test]
    fn partition_validation() {
        assert!(Penalty::new(vec![Group { idx: vec![0, 0], rho: Rho::None }], 0.0, 2).is_err());
        assert!(Penalty::new(vec![Group { idx: vec![0], rho: Rho::None }], 0.0, 2).is_err());
        assert!(Penalty::new(vec![], 0.0, 0).is_ok());
        assert!(Penalty::scad(1.0, 2.0, 1).is_err());
        assert!(Penalty::mcp(1.0, 1.0, 1).is_err());
    }

    #[test]
    fn rho_is_nondecreasing() {
        let kinds = [
            Rho::L1 { lambda: 0.4 },
            Rho::Scad { lambda: 0.8, a: 3.7 },
            Rho::Mcp { lambda: 1.1, gamma: 2.5 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for rho in kinds {
            for _ in 0..200 {
                let a = rng.gen_range(0.0..6.0);
                let b = a + rng.gen_range(0.0..3.0);
                assert!(rho.value(b) >= rho.value(a) - 1e-12);
                assert!(rho.prime(a) >= 0.0);
            }
        }
    }
}
