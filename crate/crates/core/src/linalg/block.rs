use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagBlock {
    pub row_offset: usize,
    pub col_offset: usize,
    pub matrix: DenseMatrix,
}

/// Block-diagonal matrix. Blocks may be rectangular (and zero-width), but
/// they tile the rows and the columns contiguously in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagonal {
    rows: usize,
    cols: usize,
    blocks: Vec<DiagBlock>,
}

impl BlockDiagonal {
    /// Lay out `blocks` back to back.
    pub fn from_blocks(blocks: Vec<DenseMatrix>) -> Self {
        let (mut r, mut c) = (0, 0);
        let mut out = Vec::with_capacity(blocks.len());
        for m in blocks {
            let (br, bc) = m.shape();
            out.push(DiagBlock { row_offset: r, col_offset: c, matrix: m });
            r += br;
            c += bc;
        }
        Self { rows: r, cols: c, blocks: out }
    }

    pub fn new(rows: usize, cols: usize, blocks: Vec<DiagBlock>) -> Result<Self> {
        let bd = Self { rows, cols, blocks };
        bd.validate()?;
        Ok(bd)
    }

    pub fn validate(&self) -> Result<()> {
        let (mut r, mut c) = (0, 0);
        for b in &self.blocks {
            if b.row_offset != r || b.col_offset != c {
                return Err(Error::dims("BlockDiagonal", "blocks overlap, leave gaps, or are unsorted"));
            }
            r += b.matrix.rows();
            c += b.matrix.cols();
        }
        if r != self.rows || c != self.cols {
            return Err(Error::dims(
                "BlockDiagonal",
                format!("blocks cover {r}x{c}, declared {}x{}", self.rows, self.cols),
            ));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn blocks(&self) -> &[DiagBlock] {
        &self.blocks
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for b in &self.blocks {
            m.set_submatrix(b.row_offset, b.col_offset, &b.matrix);
        }
        m
    }

    /// `X · self` without materialising the zeros.
    pub fn right_apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.rows {
            return Err(Error::dims("BlockDiagonal::right_apply", format!("{} vs {}", x.cols(), self.rows)));
        }
        let mut out = DenseMatrix::zeros(x.rows(), self.cols);
        for b in &self.blocks {
            if b.matrix.cols() == 0 {
                continue;
            }
            let part = x.column_block(b.row_offset, b.matrix.rows()).mul(&b.matrix);
            out.set_submatrix(0, b.col_offset, &part);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_layout_and_apply() {
        let bd = BlockDiagonal::from_blocks(vec![
            DenseMatrix::from_rows(&[[1.0], [2.0]]),
            DenseMatrix::zeros(1, 0),
            DenseMatrix::from_rows(&[[3.0, 4.0]]),
        ]);
        assert_eq!(bd.shape_tuple(), (4, 3));
        let d = bd.to_dense();
        assert_eq!(d[(0, 0)], 1.0);
        assert_eq!(d[(3, 2)], 4.0);
        assert_eq!(d[(0, 1)], 0.0);
        let x = DenseMatrix::from_fn(2, 4, |i, j| (i * 4 + j) as f64);
        assert!(bd.right_apply(&x).unwrap().max_abs_diff(&x.mul(&d)) < 1e-15);
    }

    #[test]
    fn rejects_gaps() {
        let blocks = vec![DiagBlock { row_offset: 1, col_offset: 0, matrix: DenseMatrix::identity(1) }];
        assert!(BlockDiagonal::new(2, 1, blocks).is_err());
    }

    impl BlockDiagonal {
        fn shape_tuple(&self) -> (usize, usize) {
            (self.rows, self.cols)
        }
    }
}
