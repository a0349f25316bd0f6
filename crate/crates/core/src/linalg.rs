//! Dense linear-algebra helpers on top of nalgebra.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::math;

/// Relative singular-value cutoff used for ranks and pseudoinverses.
pub const SVD_CUTOFF: f64 = 1e-10;

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    sv
}

/// Numerical rank with cutoff `SVD_CUTOFF * σ_max`.
pub fn rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    match sv.first() {
        Some(&smax) if smax > 0.0 => sv.iter().filter(|&&s| s > SVD_CUTOFF * smax).count(),
        _ => 0,
    }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Smallest singular value above the cutoff, i.e. `1 / ‖m†‖₂`.
pub fn smallest_nonzero_singular_value(m: &DMatrix<f64>) -> Option<f64> {
    let sv = singular_values(m);
    let smax = *sv.first()?;
    if smax <= 0.0 {
        return None;
    }
    sv.into_iter().filter(|&s| s > SVD_CUTOFF * smax).last()
}

/// Moore-Penrose pseudoinverse via SVD with cutoff `SVD_CUTOFF * σ_max`.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut out = DMatrix::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > SVD_CUTOFF * smax && s > 0.0 {
            let vk = v_t.row(k).transpose();
            let uk = u.column(k);
            out += (vk * uk.transpose()) / s;
        }
    }
    out
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let ev = sym.symmetric_eigen().eigenvalues;
    let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Solves `a x = b` by LU with full pivoting; `None` when numerically singular.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = a.nrows();
    if n != a.ncols() || n != b.len() {
        return None;
    }
    let scale = a.iter().fold(0.0f64, |m, &x| m.max(math::abs(x)));
    if scale == 0.0 {
        return None;
    }
    let lu = a.clone().full_piv_lu();
    let u = lu.u();
    let min_pivot = (0..n).map(|i| math::abs(u[(i, i)])).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-14 * scale {
        return None;
    }
    lu.solve(b)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky().map(|c| c.inverse())
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(math::abs(x)))
}

/// Euclidean projection onto the probability simplex (sort-based).
///
/// Sorting is stable, so equal entries keep index order.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    if n == 0 {
        return Vec::new();
    }
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j as f64 + 1.0);
        if uj - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Radial projection onto the Euclidean ball of the given radius.
pub fn project_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = v.norm();
    if n > radius && n > 0.0 {
        v * (radius / n)
    } else {
        v.clone()
    }
}

/// Row-wise softmax of `scale * scores` with max-subtraction.
pub fn softmax_rows(scores: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(scores.nrows(), scores.ncols());
    for i in 0..scores.nrows() {
        let row: Vec<f64> = scores.row(i).iter().map(|&x| scale * x).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = row.iter().map(|&x| math::exp(x - m)).collect();
        let z: f64 = ex.iter().sum();
        for (j, e) in ex.iter().enumerate() {
            out[(i, j)] = e / z;
        }
    }
    out
}
