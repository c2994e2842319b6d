//! Shared numerical oracles for unit tests: central finite differences and
//! related brute-force checks. Test-only.

use nalgebra::{DMatrix, DVector};

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, at: &DVector<f64>, h: f64) -> DVector<f64> {
    let d = at.len();
    DVector::from_fn(d, |k, _| {
        let mut up = at.clone();
        let mut dn = at.clone();
        up[k] += h;
        dn[k] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    })
}

/// Central finite-difference Jacobian of a vector function (rows = output
/// components, columns = input components).
pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, at: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = at.len();
    let m = f(at).len();
    let mut jac = DMatrix::zeros(m, d);
    for k in 0..d {
        let mut up = at.clone();
        let mut dn = at.clone();
        up[k] += h;
        dn[k] -= h;
        let col = (f(&up) - f(&dn)) / (2.0 * h);
        jac.set_column(k, &col);
    }
    jac
}

/// Minimize a scalar objective over a uniform grid; returns (argmin, min).
pub fn grid_argmin<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, points: usize) -> (f64, f64) {
    let mut best = (lo, f(lo));
    for i in 1..points {
        let u = lo + (hi - lo) * i as f64 / (points - 1) as f64;
        let v = f(u);
        if v < best.1 {
            best = (u, v);
        }
    }
    best
}

/// Two-sided Kolmogorov–Smirnov statistic of a sample against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &mut [f64], cdf: F) -> f64 {
    sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sample.len() as f64;
    let mut d = 0.0f64;
    for (i, &v) in sample.iter().enumerate() {
        let c = cdf(v);
        d = d.max((c - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - c).abs());
    }
    d
}
