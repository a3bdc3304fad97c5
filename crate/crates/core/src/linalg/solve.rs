use serde::{Deserialize, Serialize};

use super::eig::svd_tall;
use super::DenseMatrix;
use crate::error::{Error, Result};

/// Relative damping used by [`Ridge::Auto`].
pub const AUTO_RIDGE_SCALE: f64 = 0.01;

/// Ridge damping: a fixed value, or `0.01 * mean(diag(AᵀA))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum Ridge {
    #[default]
    Auto,
    Value(f64),
}


impl Ridge {
    /// Resolve to a concrete damping for the normal matrix `ata`.
    pub fn resolve(self, ata: &DenseMatrix) -> f64 {
        match self {
            Ridge::Value(v) => v,
            Ridge::Auto => {
                let n = ata.rows().max(1) as f64;
                let mean = ata.trace() / n;
                if mean > 0.0 {
                    AUTO_RIDGE_SCALE * mean
                } else {
                    1.0
                }
            }
        }
    }
}

/// Cholesky factor `L` with `A = L Lᵀ`; `None` if a pivot is not safely positive.
pub(crate) fn cholesky(a: &DenseMatrix) -> Option<DenseMatrix> {
    let n = a.rows();
    let max_diag = a.diagonal().into_iter().fold(0.0f64, f64::max);
    let tiny = 1e-13 * max_diag.max(1e-300);
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tiny) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solve `A X = B` given the Cholesky factor of `A`.
pub(crate) fn cholesky_solve(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// `(AᵀA + λI)⁻¹ AᵀB`, the minimiser of `‖AW − B‖² + λ‖W‖²`.
pub fn ridge_solve(a: &DenseMatrix, b: &DenseMatrix, lambda: Ridge) -> Result<DenseMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::dims("ridge_solve", format!("A rows {} vs B rows {}", a.rows(), b.rows())));
    }
    ridge_solve_normal(&a.t_mul(a), &a.t_mul(b), lambda)
}

/// Ridge solve from precomputed normal-equation blocks `AᵀA` and `AᵀB`.
pub fn ridge_solve_normal(ata: &DenseMatrix, atb: &DenseMatrix, lambda: Ridge) -> Result<DenseMatrix> {
    let n = ata.rows();
    if ata.cols() != n || atb.rows() != n {
        return Err(Error::dims("ridge_solve", format!("{:?} / {:?}", ata.shape(), atb.shape())));
    }
    let lam = lambda.resolve(ata);
    if !(lam >= 0.0) || !lam.is_finite() {
        return Err(Error::OutOfRange { what: "ridge lambda", detail: format!("{lam}") });
    }
    let mut m = ata.symmetrized();
    for i in 0..n {
        m[(i, i)] += lam;
    }
    let l = cholesky(&m).ok_or(Error::Singular { op: "ridge_solve" })?;
    let w = cholesky_solve(&l, atb);
    if !w.is_finite() {
        return Err(Error::NonFinite("ridge_solve".into()));
    }
    Ok(w)
}

/// Relative singular-value cutoff for [`pseudo_inverse`].
pub const PINV_RCOND: f64 = 1e-10;

/// Moore–Penrose pseudo-inverse; singular values below `1e-10 × max` are
/// treated as zero.
pub fn pseudo_inverse(q: &DenseMatrix) -> Result<DenseMatrix> {
    if !q.is_finite() {
        return Err(Error::NonFinite("pseudo_inverse input".into()));
    }
    if q.rows() < q.cols() {
        return Ok(pseudo_inverse(&q.transpose())?.transpose());
    }
    let (u, s, v) = svd_tall(q)?;
    let smax = s.first().copied().unwrap_or(0.0);
    let cut = PINV_RCOND * smax;
    let (m, n) = q.shape();
    // Q⁺ = V Σ⁺ Uᵀ
    let vs = DenseMatrix::from_fn(n, n, |i, j| {
        if s[j] > cut && s[j] > 0.0 {
            v[(i, j)] / s[j]
        } else {
            0.0
        }
    });
    let out = vs.mul_t(&u);
    debug_assert_eq!(out.shape(), (n, m));
    Ok(out)
}
