//! Decoder-only transformer: RMSNorm, multi-head attention with rotary
//! embedding and optional grouped KV heads, gated SiLU FFN. Heads may carry
//! a pruned width and a subset of rotary pairs.

mod backward;
mod checkpoint;
mod config;
pub mod container;
mod forward;
pub mod rope;
mod trace;
mod train;

pub use backward::{loss_and_gradients, loss_and_mask_gradients, GradOptions, Gradients, MaskGradients};
pub use checkpoint::{layer_key, Checkpoint, LayerLayout, PROJECTIONS};
pub use config::{ModelConfig, NORM_EPS};
pub use forward::{
    capture_trace, empty_trace, forward_capture, forward_with, logits, loss, perplexity, Hooks, MaskSet, TokenBatch,
};
pub use trace::{ActivationTrace, Capture, CaptureOptions, LayerTrace, DEFAULT_ROW_CAP};
pub use train::{train_toy, TrainLog, TrainOptions};

pub(crate) use forward::{attention, embed, positions, rms_norm, silu, silu_grad, AttnSpec};
