//! Numerical checking helpers: finite differences, numeric Jacobians and
//! log-determinants. Used by the test suites and by `denseflow verify`.

use alloc::vec::Vec;

use nalgebra::DMatrix;

/// Central-difference gradient of a scalar function of a flat vector.
pub fn fd_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + eps;
            let hi = f(&xp);
            xp[i] = x[i] - eps;
            let lo = f(&xp);
            xp[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Central difference of `f` along a single coordinate.
pub fn fd_partial(x: &[f64], i: usize, eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] = x[i] + eps;
    let hi = f(&xp);
    xp[i] = x[i] - eps;
    let lo = f(&xp);
    (hi - lo) / (2.0 * eps)
}

/// Central-difference Jacobian of a vector map, `J[i][j] = d out_i / d x_j`.
pub fn numeric_jacobian(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut xp = x.to_vec();
    let mut cols = Vec::with_capacity(n);
    let mut m = 0;
    for j in 0..n {
        xp[j] = x[j] + eps;
        let hi = f(&xp);
        xp[j] = x[j] - eps;
        let lo = f(&xp);
        xp[j] = x[j];
        m = hi.len();
        cols.push(hi.iter().zip(&lo).map(|(a, b)| (a - b) / (2.0 * eps)).collect::<Vec<_>>());
    }
    DMatrix::from_fn(m, n, |i, j| cols[j][i])
}

/// `ln |det A|` through an LU factorization.
pub fn log_abs_det(a: &DMatrix<f64>) -> f64 {
    let lu = a.clone().lu();
    let u = lu.u();
    (0..u.nrows()).map(|i| num_traits::Float::ln(num_traits::Float::abs(u[(i, i)]))).sum()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let d = num_traits::Float::abs(a - b);
    let s = num_traits::Float::abs(a).max(num_traits::Float::abs(b)).max(floor);
    d / s
}

/// Frobenius-norm relative error `||a - b|| / ||b||`.
pub fn rel_err_vec(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    num_traits::Float::sqrt(num) / num_traits::Float::sqrt(den).max(f64::MIN_POSITIVE)
}
