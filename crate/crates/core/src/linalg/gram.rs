use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Streaming `XᵀX` over row chunks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramAccumulator {
    pub dim: usize,
    pub gram: DenseMatrix,
    pub samples: usize,
}

impl GramAccumulator {
    pub fn zero(dim: usize) -> Self {
        Self { dim, gram: DenseMatrix::zeros(dim, dim), samples: 0 }
    }

    pub fn from_rows(x: &DenseMatrix) -> Self {
        let mut acc = Self::zero(x.cols());
        acc.accumulate(x).expect("dimension taken from x");
        acc
    }

    /// `gram += XᵀX`, `samples += X.rows`, then symmetrize.
    pub fn accumulate(&mut self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::dims(
                "gram_accumulate",
                format!("expected {} columns, got {}", self.dim, x.cols()),
            ));
        }
        self.gram.add_assign(&x.t_mul(x));
        self.gram = self.gram.symmetrized();
        self.samples += x.rows();
        Ok(())
    }

    pub fn merge(&mut self, other: &GramAccumulator) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::dims("gram_merge", format!("{} vs {}", self.dim, other.dim)));
        }
        self.gram.add_assign(&other.gram);
        self.samples += other.samples;
        Ok(())
    }

    /// Principal sub-block over `[start, start + width)`.
    pub fn block(&self, start: usize, width: usize) -> GramAccumulator {
        GramAccumulator {
            dim: width,
            gram: self.gram.submatrix(start, start, width, width),
            samples: self.samples,
        }
    }

    /// Principal submatrix over an arbitrary index set.
    pub fn select(&self, idx: &[usize]) -> GramAccumulator {
        GramAccumulator {
            dim: idx.len(),
            gram: DenseMatrix::from_fn(idx.len(), idx.len(), |i, j| self.gram[(idx[i], idx[j])]),
            samples: self.samples,
        }
    }
}

/// Functional form: returns the updated accumulator.
pub fn gram_accumulate(acc: GramAccumulator, x: &DenseMatrix) -> Result<GramAccumulator> {
    let mut acc = acc;
    acc.accumulate(x)?;
    Ok(acc)
}
