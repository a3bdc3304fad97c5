//! Rotary position embedding with the half-split pairing: channel `i` pairs
//! with channel `i + head_dim/2`. A pruned head keeps a subset of pairs and
//! stores them compactly as `[firsts..., seconds...]`, so the same half-split
//! rotation applies to the compact layout with the surviving frequencies.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Inverse frequency of rotary pair `pair` for an original width `head_dim`.
pub fn inv_freq(head_dim: usize, theta: f64, pair: usize) -> f64 {
    theta.powf(-2.0 * pair as f64 / head_dim as f64)
}

/// Frequencies of the pairs kept by `mask`, in compact order.
pub fn pair_frequencies(head_dim: usize, theta: f64, mask: &[bool]) -> Vec<f64> {
    mask.iter()
        .enumerate()
        .filter(|(_, keep)| **keep)
        .map(|(j, _)| inv_freq(head_dim, theta, j))
        .collect()
}

/// Original channel indices kept by `mask`, in compact order.
pub fn selected_channels(mask: &[bool]) -> Vec<usize> {
    let half = mask.len();
    let firsts: Vec<usize> = (0..half).filter(|&j| mask[j]).collect();
    let seconds = firsts.iter().map(|&j| j + half);
    firsts.iter().copied().chain(seconds).collect()
}

/// 0/1 `head_dim × p` matrix selecting the masked pairs.
pub fn pair_selection_matrix(mask: &[bool]) -> DenseMatrix {
    let chans = selected_channels(mask);
    let mut m = DenseMatrix::zeros(2 * mask.len(), chans.len());
    for (col, &c) in chans.iter().enumerate() {
        m[(c, col)] = 1.0;
    }
    m
}

/// Keep only the masked pairs of a full-width head.
pub fn select_pairs(x: &DenseMatrix, mask: &[bool]) -> Result<DenseMatrix> {
    if x.cols() != 2 * mask.len() {
        return Err(Error::dims("select_pairs", format!("{} channels, mask of {} pairs", x.cols(), mask.len())));
    }
    Ok(x.select_columns(&selected_channels(mask)))
}

/// Rotate a compact head. `positions[r]` is the position of row `r`, and
/// `freqs` has one entry per surviving pair.
pub fn rotate(x: &DenseMatrix, positions: &[usize], freqs: &[f64]) -> Result<DenseMatrix> {
    rotate_signed(x, positions, freqs, 1.0)
}

/// Transpose of [`rotate`] (rotation by the negated angle).
pub fn rotate_inverse(x: &DenseMatrix, positions: &[usize], freqs: &[f64]) -> Result<DenseMatrix> {
    rotate_signed(x, positions, freqs, -1.0)
}

fn rotate_signed(x: &DenseMatrix, positions: &[usize], freqs: &[f64], sign: f64) -> Result<DenseMatrix> {
    if !x.cols().is_multiple_of(2) {
        return Err(Error::dims("rope", format!("odd active channel count {}", x.cols())));
    }
    let half = x.cols() / 2;
    if freqs.len() != half || positions.len() != x.rows() {
        return Err(Error::dims(
            "rope",
            format!("{} pairs / {} freqs, {} rows / {} positions", half, freqs.len(), x.rows(), positions.len()),
        ));
    }
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for (a, &f) in freqs.iter().enumerate() {
            let angle = sign * pos as f64 * f;
            let (s, c) = angle.sin_cos();
            let (x1, x2) = (row[a], row[a + half]);
            row[a] = x1 * c - x2 * s;
            row[a + half] = x1 * s + x2 * c;
        }
    }
    Ok(out)
}

/// Rotary embedding of a full-width head restricted to the masked pairs;
/// pruned pairs are absent from the output.
pub fn apply_rope(x: &DenseMatrix, positions: &[usize], theta: f64, pair_mask: &[bool]) -> Result<DenseMatrix> {
    if !x.cols().is_multiple_of(2) {
        return Err(Error::dims("apply_rope", format!("odd active channel count {}", x.cols())));
    }
    let compact = select_pairs(x, pair_mask)?;
    rotate(&compact, positions, &pair_frequencies(x.cols(), theta, pair_mask))
}
