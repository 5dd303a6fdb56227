//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative threshold on |R_ii| below which a design is treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

pub struct LeastSquares {
    pub coefficients: DVector<f64>,
    pub ridge: Option<f64>,
}

/// Least squares via thin QR; falls back to ridge-regularized normal
/// equations (λ = 1e-8·trace(X'X)/K) when the design is rank deficient.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> LeastSquares {
    let k = x.ncols();
    if k == 0 {
        return LeastSquares { coefficients: DVector::zeros(0), ridge: None };
    }
    if x.nrows() >= k {
        let qr = x.clone().qr();
        let r = qr.r();
        let rmax = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        let full_rank = rmax > 0.0 && (0..k).all(|i| r[(i, i)].abs() > RANK_TOL * rmax);
        if full_rank {
            let qty = qr.q().transpose() * y;
            if let Some(b) = r.solve_upper_triangular(&qty) {
                return LeastSquares { coefficients: b, ridge: None };
            }
        }
    }
    let mut xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let lambda = 1e-8 * xtx.trace().max(f64::MIN_POSITIVE) / k as f64;
    for i in 0..k {
        xtx[(i, i)] += lambda;
    }
    let b = xtx
        .clone()
        .cholesky()
        .map(|c| c.solve(&xty))
        .unwrap_or_else(|| xtx.pseudo_inverse(1e-14).expect("pseudo-inverse") * xty);
    LeastSquares { coefficients: b, ridge: Some(lambda) }
}

/// Inverse of a symmetric positive definite matrix, `None` if Cholesky fails
/// or the reciprocal condition estimate is below `rcond`.
pub fn spd_inverse(a: &DMatrix<f64>, rcond: f64) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    let n = a.nrows();
    let diag: Vec<f64> = (0..n).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if max.is_nan() || max <= 0.0 || min / max < rcond {
        return None;
    }
    Some(symmetrize(&chol.inverse()))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetrize(a).symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// PSD up to `tol` relative to the largest absolute eigenvalue.
pub fn is_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    let ev = symmetrize(a).symmetric_eigenvalues();
    let scale = ev.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    ev.iter().all(|&v| v >= -tol * scale)
}

pub fn max_abs_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(1e-300);
    (a - b).amax() / scale
}
