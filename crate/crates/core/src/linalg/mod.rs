//! Dense and block-diagonal linear algebra in `f64`.

mod block;
mod eig;
mod gram;
mod matrix;
mod solve;

pub use block::{BlockDiagonal, DiagBlock};
pub use eig::{sym_eig, EigenSystem};
pub use gram::{gram_accumulate, GramAccumulator};
pub use matrix::DenseMatrix;
pub use solve::{pseudo_inverse, ridge_solve, ridge_solve_normal, Ridge, AUTO_RIDGE_SCALE, PINV_RCOND};

use crate::error::{Error, Result};

/// Top-`p` principal directions of a Gram matrix as a `dim × p` matrix with
/// orthonormal columns.
pub fn pca_basis(g: &GramAccumulator, p: usize) -> Result<DenseMatrix> {
    if p == 0 || p > g.dim {
        return Err(Error::OutOfRange { what: "pca width", detail: format!("p={p}, dim={}", g.dim) });
    }
    Ok(sym_eig(&g.gram)?.leading_vectors(p))
}

/// Smallest `k` whose leading eigenvalues hold at least `tau` of the total
/// energy; 0 for an all-zero spectrum.
pub fn energy_rank(values: &[f64], tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::OutOfRange { what: "energy threshold", detail: format!("{tau}") });
    }
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(&neg) = values.iter().find(|&&v| v < -1e-10 * max) {
        return Err(Error::NegativeEigenvalue { value: neg });
    }
    let clipped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total == 0.0 {
        return Ok(0);
    }
    // Slack absorbs rounding in the cumulative sum.
    let target = tau * total - 1e-12 * total;
    let mut acc = 0.0;
    for (k, v) in clipped.iter().enumerate() {
        acc += v;
        if acc >= target {
            return Ok(k + 1);
        }
    }
    Ok(clipped.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn energy_rank_examples() {
        assert_eq!(energy_rank(&[9.0, 0.5, 0.5], 0.99).unwrap(), 3);
        assert_eq!(energy_rank(&[1.0, 0.0, 0.0], 0.99).unwrap(), 1);
        assert_eq!(energy_rank(&[4.0, 3.0, 2.0, 1.0], 0.9).unwrap(), 3);
        assert_eq!(energy_rank(&[0.0, 0.0], 0.99).unwrap(), 0);
        assert!(energy_rank(&[1.0, -0.5], 0.9).is_err());
        assert_eq!(energy_rank(&[1.0, -1e-14], 0.9).unwrap(), 1);
    }

    proptest! {
        #[test]
        fn energy_rank_monotone_in_tau(mut v in prop::collection::vec(0.0f64..10.0, 1..12), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
            v.sort_by(|a, b| b.total_cmp(a));
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(energy_rank(&v, lo).unwrap() <= energy_rank(&v, hi).unwrap());
        }
    }

    #[test]
    fn pca_rank_one() {
        let u = [0.6, 0.8, 0.0];
        let x = DenseMatrix::from_fn(5, 3, |i, j| (i as f64 - 2.0) * u[j]);
        let g = GramAccumulator::from_rows(&x);
        let q = pca_basis(&g, 1).unwrap();
        let recon = x.mul(&q).mul_t(&q);
        assert!(recon.max_abs_diff(&x) < 1e-12);
        assert!((q[(0, 0)] - 0.6).abs() < 1e-12 && (q[(1, 0)] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pca_full_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DenseMatrix::from_fn(20, 4, |_, _| rng.random_range(-1.0..1.0));
        let q = pca_basis(&GramAccumulator::from_rows(&x), 4).unwrap();
        assert!(q.mul_t(&q).max_abs_diff(&DenseMatrix::identity(4)) < 1e-8);
        assert!(pca_basis(&GramAccumulator::from_rows(&x), 5).is_err());
        assert!(pca_basis(&GramAccumulator::from_rows(&x), 0).is_err());
    }
}
