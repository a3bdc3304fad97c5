//! Intra-module PCA structured pruning for decoder-only transformers.
//!
//! Attention heads are scored, the uninformative ones removed, and the rest
//! compressed to a uniform per-head width with PCA. Gated FFN channels are
//! compressed with a selection initialisation followed by optional sliced
//! refinement. Every transform is fused into the surrounding weights, so the
//! pruned model has no extra parameters or runtime operations.
//!
//! Module map:
//! - [`linalg`]: dense kernels (Jacobi eigensolver, PCA bases, ridge, pseudo-inverse)
//! - [`tmodel`]: the toy transformer, activation capture, mask gradients, trainer
//! - [`headprune`]: adaptive head compression and attention fusion
//! - [`ffnprune`]: sliced iterative PCA for the gated FFN
//! - [`globalratio`]: non-uniform per-layer ratio allocation
//! - [`pipeline`]: end-to-end pruning, calibration, fuse check, reports
//! - [`eval`]: rank profiles, inter-module probe, baselines, report tables

pub mod error;
pub mod eval;
pub mod ffnprune;
pub mod globalratio;
pub mod headprune;
pub mod linalg;
pub mod pipeline;
pub mod tmodel;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
