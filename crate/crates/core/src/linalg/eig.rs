//! Cyclic Jacobi eigensolver for symmetric matrices and a one-sided Jacobi
//! SVD built on the same rotations.

use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
/// Relative asymmetry accepted before symmetrizing.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Eigenvalues in descending order with matching eigenvector columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V diag(values) Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.dim();
        let scaled = DenseMatrix::from_fn(n, n, |i, j| self.vectors[(i, j)] * self.values[j]);
        scaled.mul_t(&self.vectors)
    }

    /// First `p` eigenvector columns.
    pub fn leading_vectors(&self, p: usize) -> DenseMatrix {
        self.vectors.column_block(0, p)
    }
}

/// Full eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(G + Gᵀ)/2` first. Each eigenvector is signed
/// so its largest-magnitude entry is positive; ties among equal eigenvalues
/// keep the original index order.
pub fn sym_eig(g: &DenseMatrix) -> Result<EigenSystem> {
    let n = g.rows();
    if g.cols() != n {
        return Err(Error::dims("sym_eig", format!("non-square {:?}", g.shape())));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("sym_eig input".into()));
    }
    let scale = g.max_abs();
    let asym = g.max_asymmetry();
    if asym > SYMMETRY_TOL * scale.max(1e-300) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let mut a = g.symmetrized();
    let mut v = DenseMatrix::identity(n);
    if n == 0 {
        return Ok(EigenSystem { values: vec![], vectors: v });
    }
    let floor = 1e-18 * a.frobenius_norm();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= floor.max(1e-300)
                    || apq.abs() <= 1e-16 * (a[(p, p)] * a[(q, q)]).abs().sqrt()
                {
                    continue;
                }
                rotated = true;
                let (c, s) = jacobi_rotation(a[(p, p)], a[(q, q)], apq);
                rotate_cols(&mut a, p, q, c, s);
                rotate_rows(&mut a, p, q, c, s);
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                rotate_cols(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { op: "sym_eig", iterations: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = v.select_columns(&order);
    fix_signs(&mut vectors);
    Ok(EigenSystem { values, vectors })
}

/// Rotation `(c, s)` that annihilates the off-diagonal entry of
/// `[[app, apq], [apq, aqq]]` under `Jᵀ A J`.
fn jacobi_rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta.is_infinite() {
        0.0
    } else {
        let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
        sign / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    (c, t * c)
}

fn rotate_cols(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.rows() {
        let (mp, mq) = (m[(k, p)], m[(k, q)]);
        m[(k, p)] = c * mp - s * mq;
        m[(k, q)] = s * mp + c * mq;
    }
}

fn rotate_rows(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.cols() {
        let (mp, mq) = (m[(p, k)], m[(q, k)]);
        m[(p, k)] = c * mp - s * mq;
        m[(q, k)] = s * mp + c * mq;
    }
}

/// Flip every column so that its largest-magnitude entry is positive.
pub(crate) fn fix_signs(vectors: &mut DenseMatrix) {
    for j in 0..vectors.cols() {
        let mut best = 0usize;
        for i in 0..vectors.rows() {
            if vectors[(i, j)].abs() > vectors[(best, j)].abs() + 1e-12 {
                best = i;
            }
        }
        if vectors.rows() > 0 && vectors[(best, j)] < 0.0 {
            for i in 0..vectors.rows() {
                vectors[(i, j)] = -vectors[(i, j)];
            }
        }
    }
}

/// Thin SVD `Q = U diag(s) Vᵀ` by one-sided Jacobi (Hestenes), i.e. Jacobi
/// diagonalisation of `QᵀQ` carried out on the columns of `Q`.
/// Requires `rows >= cols`; singular values come back descending.
pub(crate) fn svd_tall(q: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    let (m, n) = q.shape();
    debug_assert!(m >= n);
    let mut u = q.clone();
    let mut v = DenseMatrix::identity(n);
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..m {
                    let (ui, uj) = (u[(k, i)], u[(k, j)]);
                    alpha += ui * ui;
                    beta += uj * uj;
                    gamma += ui * uj;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let (c, s) = jacobi_rotation(alpha, beta, gamma);
                rotate_cols(&mut u, i, j, c, s);
                rotate_cols(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { op: "svd", iterations: MAX_SWEEPS });
    }
    let sigma: Vec<f64> = u.column_norms_sq().into_iter().map(f64::sqrt).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let s: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    let mut uu = u.select_columns(&order);
    for (j, &sv) in s.iter().enumerate() {
        if sv > 0.0 {
            for k in 0..m {
                uu[(k, j)] /= sv;
            }
        }
    }
    Ok((uu, s, v.select_columns(&order)))
}
