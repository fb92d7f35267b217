//! Small dense linear-algebra helpers shared by the filters.

use nalgebra::{DMatrix, DVector};

/// Replace `m` by `(m + m') / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Lower-triangular factor `L` with `L L' = m` for a symmetric positive
/// semi-definite matrix.
///
/// Zero pivots are allowed (the corresponding column of `L` is zero), so
/// degenerate scale matrices such as those of fully phased-out coefficients
/// can still be sampled from. Returns `None` when a pivot is negative beyond
/// `rel_tol` times the largest diagonal element.
pub fn psd_factor(m: &DMatrix<f64>, rel_tol: f64) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0_f64, f64::max);
    let mut l = DMatrix::<f64>::zeros(n, n);
    if scale == 0.0 {
        return Some(l);
    }
    let zero_tol = 1e-14 * scale;
    let neg_tol = rel_tol * scale;
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d > zero_tol {
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        } else if d < -neg_tol {
            return None;
        }
    }
    Some(l)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Clamp negative eigenvalues of a symmetric matrix to zero when the smallest
/// one falls below `-rel_tol * trace`. Returns whether a repair happened.
pub fn repair_psd(m: &mut DMatrix<f64>, rel_tol: f64) -> bool {
    let n = m.nrows();
    if n == 0 {
        return false;
    }
    // A successful semi-definite factorisation is much cheaper than an
    // eigendecomposition and settles the common case.
    if psd_factor(m, 0.0).is_some() {
        return false;
    }
    let trace = m.trace().abs();
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= -rel_tol * trace {
        return false;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    *m = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    symmetrize(m);
    true
}

/// `log |det(m)|` and the sign of the determinant via LU; `None` when the
/// matrix is numerically singular.
pub fn log_abs_det(m: &DMatrix<f64>) -> Option<(f64, f64)> {
    let n = m.nrows();
    if n == 0 {
        return Some((0.0, 1.0));
    }
    let lu = m.clone().lu();
    let det = lu.determinant();
    if !det.is_finite() || det.abs() < 1e-300 {
        return None;
    }
    Some((det.abs().ln(), det.signum()))
}

/// Inverse of a symmetric positive definite matrix, adding a ridge of
/// `ridge_rel * trace / n` when the plain Cholesky factorisation fails.
/// The flag reports whether the ridge was needed.
pub fn spd_inverse_with_ridge(m: &DMatrix<f64>, ridge_rel: f64) -> Option<(DMatrix<f64>, bool)> {
    if let Some(ch) = m.clone().cholesky() {
        return Some((ch.inverse(), false));
    }
    let n = m.nrows().max(1);
    let ridge = ridge_rel * m.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
    let mut r = m.clone();
    for i in 0..m.nrows() {
        r[(i, i)] += ridge;
    }
    r.cholesky().map(|ch| (ch.inverse(), true))
}

/// Quadratic form `x' M^{-1} x` and `log det M` for a symmetric positive
/// definite `M`.
pub fn spd_quad_logdet(m: &DMatrix<f64>, x: &DVector<f64>) -> Option<(f64, f64)> {
    let ch = m.clone().cholesky()?;
    let l = ch.l_dirty();
    let mut logdet = 0.0;
    for i in 0..m.nrows() {
        logdet += 2.0 * l[(i, i)].ln();
    }
    let z = l.solve_lower_triangular(x)?;
    Some((z.norm_squared(), logdet))
}
