use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{DenseMatrix, GramAccumulator};

pub const DEFAULT_ROW_CAP: usize = 4096;

/// Second moments of one activation site plus the first `cap` rows seen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capture {
    pub gram: GramAccumulator,
    pub sample: DenseMatrix,
    pub cap: usize,
}

impl Capture {
    pub fn new(dim: usize, cap: usize) -> Self {
        Self { gram: GramAccumulator::zero(dim), sample: DenseMatrix::zeros(0, dim), cap }
    }

    pub fn dim(&self) -> usize {
        self.gram.dim
    }

    pub fn rows_seen(&self) -> usize {
        self.gram.samples
    }

    pub fn absorb(&mut self, x: &DenseMatrix) -> Result<()> {
        self.gram.accumulate(x)?;
        let room = self.cap.saturating_sub(self.sample.rows()).min(x.rows());
        if room > 0 {
            self.sample = DenseMatrix::vstack(&[&self.sample, &x.row_block(0, room)])?;
        }
        Ok(())
    }

    /// True when the row sample holds every row that was accumulated.
    pub fn sample_is_complete(&self) -> bool {
        self.sample.rows() == self.gram.samples
    }
}

/// Captured activations of one transformer block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// Normalised input to the attention projections.
    pub mha_input: Capture,
    /// Pre-rotary query projections (all retained heads concatenated).
    pub q_out: Capture,
    /// Pre-rotary key projections (retained KV groups concatenated).
    pub k_out: Capture,
    /// Concatenated head outputs entering `W_o`.
    pub o_proj_input: Capture,
    pub ffn_input: Capture,
    pub up_out: Capture,
    pub gate_out: Capture,
    /// Gated intermediate entering `W_d`.
    pub down_input: Capture,
    /// Residual stream after the block.
    pub block_output: Capture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub layers: Vec<Option<LayerTrace>>,
}

impl ActivationTrace {
    pub fn layer(&self, l: usize) -> Option<&LayerTrace> {
        self.layers.get(l).and_then(Option::as_ref)
    }

    /// Rows per capture; equal across every populated site.
    pub fn rows(&self) -> usize {
        self.layers.iter().flatten().next().map_or(0, |t| t.mha_input.rows_seen())
    }
}

/// Which layers to capture and how many raw rows to keep per site.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureOptions {
    pub layers: Option<Vec<usize>>,
    pub row_cap: usize,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        Self { layers: None, row_cap: DEFAULT_ROW_CAP }
    }
}

impl CaptureOptions {
    pub fn only(layer: usize) -> Self {
        Self { layers: Some(vec![layer]), ..Self::default() }
    }

    pub fn wants(&self, l: usize) -> bool {
        self.layers.as_ref().is_none_or(|ls| ls.contains(&l))
    }
}
