use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RMSNorm epsilon shared by every norm in the model.
pub const NORM_EPS: f64 = 1e-6;

/// Architecture of the dense (pre-pruning) model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Number of key/value heads; equal to `heads` for plain MHA.
    pub kv_groups: usize,
    pub head_dim: usize,
    pub inter: usize,
    pub vocab: usize,
    pub rope_theta: f64,
    pub rope_enabled: bool,
}

impl ModelConfig {
    /// Toy model used throughout the tests and the CLI defaults.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 4,
            kv_groups: 4,
            head_dim: 8,
            inter: 64,
            vocab: 256,
            rope_theta: 10000.0,
            rope_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("kv_groups", self.kv_groups),
            ("head_dim", self.head_dim),
            ("inter", self.inter),
            ("vocab", self.vocab),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.heads.is_multiple_of(self.kv_groups) {
            return Err(Error::Config(format!(
                "kv_groups {} does not divide heads {}",
                self.kv_groups, self.heads
            )));
        }
        if self.hidden != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden {} != heads {} x head_dim {}",
                self.hidden, self.heads, self.head_dim
            )));
        }
        if self.rope_enabled && !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config("rotary embedding needs an even head_dim".into()));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_groups
    }

    pub fn group_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    /// Attention logit scale; tied to the original head width so pruned
    /// heads reproduce the dense scores.
    pub fn attn_scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}
