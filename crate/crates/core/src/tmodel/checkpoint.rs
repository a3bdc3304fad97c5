use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Per-layer shape metadata after pruning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLayout {
    /// Original indices of the query heads still present, ascending.
    pub retained_heads: Vec<usize>,
    /// Width of every retained head (query, key and value share it).
    pub per_head_dim: usize,
    /// Per retained head, which of the `head_dim / 2` rotary pairs survive.
    pub rope_pair_mask: Option<Vec<Vec<bool>>>,
    pub ffn_dim: usize,
}

impl LayerLayout {
    pub fn dense(config: &ModelConfig) -> Self {
        Self {
            retained_heads: (0..config.heads).collect(),
            per_head_dim: config.head_dim,
            rope_pair_mask: config
                .rope_enabled
                .then(|| vec![vec![true; config.head_dim / 2]; config.heads]),
            ffn_dim: config.inter,
        }
    }

    /// KV groups that still serve at least one retained query head, ascending.
    pub fn retained_groups(&self, config: &ModelConfig) -> Vec<usize> {
        let mut groups: Vec<usize> = self.retained_heads.iter().map(|&h| config.group_of(h)).collect();
        groups.dedup();
        groups
    }

    /// Position of `head`'s KV group inside the retained-group list.
    pub fn kv_slot(&self, config: &ModelConfig, head: usize) -> usize {
        let g = config.group_of(head);
        self.retained_groups(config)
            .iter()
            .position(|&x| x == g)
            .expect("head belongs to a retained group")
    }

    /// Concatenated width of the attention output.
    pub fn attn_width(&self) -> usize {
        self.retained_heads.len() * self.per_head_dim
    }

    pub fn kv_width(&self, config: &ModelConfig) -> usize {
        self.retained_groups(config).len() * self.per_head_dim
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.retained_heads.is_empty() {
            return Err(Error::Format("layer retains no heads".into()));
        }
        if !self.retained_heads.windows(2).all(|w| w[0] < w[1])
            || self.retained_heads.iter().any(|&h| h >= config.heads)
        {
            return Err(Error::Format("retained heads must be ascending and in range".into()));
        }
        if self.per_head_dim == 0 || self.per_head_dim > config.head_dim {
            return Err(Error::Format(format!("per_head_dim {} out of range", self.per_head_dim)));
        }
        if self.ffn_dim > config.inter {
            return Err(Error::Format(format!("ffn_dim {} exceeds inter {}", self.ffn_dim, config.inter)));
        }
        match (&self.rope_pair_mask, config.rope_enabled) {
            (Some(masks), true) => {
                if masks.len() != self.retained_heads.len() {
                    return Err(Error::Format("one rotary mask per retained head".into()));
                }
                for m in masks {
                    if m.len() != config.head_dim / 2 || 2 * m.iter().filter(|b| **b).count() != self.per_head_dim
                    {
                        return Err(Error::Format("rotary mask inconsistent with per_head_dim".into()));
                    }
                }
                // Heads sharing a KV group must rotate identically.
                for (i, &a) in self.retained_heads.iter().enumerate() {
                    for (j, &b) in self.retained_heads.iter().enumerate().skip(i + 1) {
                        if config.group_of(a) == config.group_of(b) && masks[i] != masks[j] {
                            return Err(Error::Format("rotary masks differ inside a KV group".into()));
                        }
                    }
                }
            }
            (None, false) => {}
            _ => return Err(Error::Format("rotary mask presence must match rope_enabled".into())),
        }
        Ok(())
    }
}

/// All weights of the model plus its pruning layout.
///
/// Tensors use the row-vector convention `y = x W`, so projection weights are
/// `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, DenseMatrix>,
    pub layout: Vec<LayerLayout>,
}

pub fn layer_key(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

/// Names of the prunable projection weights in one layer.
pub const PROJECTIONS: [&str; 7] = ["wq", "wk", "wv", "wo", "wu", "wg", "wd"];

impl Checkpoint {
    /// Seeded random initialisation: normal(0, 0.02) projections scaled down
    /// for the residual outputs, unit norm weights.
    pub fn random_init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02_f64.max(1.0 / (config.hidden as f64).sqrt() * 0.5);
        let normal = Normal::new(0.0, std).expect("positive std");
        let resid = Normal::new(0.0, std / (2.0 * config.layers as f64).sqrt()).expect("positive std");
        let mut draw = |r: usize, c: usize, d: &Normal<f64>| {
            DenseMatrix::from_fn(r, c, |_, _| d.sample(&mut rng) as f32 as f64)
        };
        let (d, kv) = (config.hidden, config.kv_groups * config.head_dim);
        let mut tensors = BTreeMap::new();
        tensors.insert("embed".to_string(), draw(config.vocab, d, &Normal::new(0.0, 1.0).unwrap()));
        for l in 0..config.layers {
            tensors.insert(layer_key(l, "attn_norm"), DenseMatrix::from_fn(1, d, |_, _| 1.0));
            tensors.insert(layer_key(l, "wq"), draw(d, d, &normal));
            tensors.insert(layer_key(l, "wk"), draw(d, kv, &normal));
            tensors.insert(layer_key(l, "wv"), draw(d, kv, &normal));
            tensors.insert(layer_key(l, "wo"), draw(d, d, &resid));
            tensors.insert(layer_key(l, "ffn_norm"), DenseMatrix::from_fn(1, d, |_, _| 1.0));
            tensors.insert(layer_key(l, "wu"), draw(d, config.inter, &normal));
            tensors.insert(layer_key(l, "wg"), draw(d, config.inter, &normal));
            tensors.insert(layer_key(l, "wd"), draw(config.inter, d, &resid));
        }
        tensors.insert("final_norm".to_string(), DenseMatrix::from_fn(1, d, |_, _| 1.0));
        tensors.insert("lm_head".to_string(), draw(d, config.vocab, &normal));
        let layout = (0..config.layers).map(|_| LayerLayout::dense(config)).collect();
        let ckpt = Self { config: config.clone(), tensors, layout };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Same shapes as `random_init`, every weight zero and norms one.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut ckpt = Self::random_init(config, 0)?;
        for (name, t) in ckpt.tensors.iter_mut() {
            let fill = if name.ends_with("norm") { 1.0 } else { 0.0 };
            *t = t.map(|_| fill);
        }
        Ok(ckpt)
    }

    pub fn tensor(&self, name: &str) -> Result<&DenseMatrix> {
        self.tensors.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn layer_tensor(&self, layer: usize, name: &str) -> Result<&DenseMatrix> {
        self.tensor(&layer_key(layer, name))
    }

    pub fn set_layer_tensor(&mut self, layer: usize, name: &str, value: DenseMatrix) {
        self.tensors.insert(layer_key(layer, name), value);
    }

    pub fn expected_shapes(&self) -> Vec<(String, (usize, usize))> {
        let c = &self.config;
        let d = c.hidden;
        let mut out = vec![
            ("embed".to_string(), (c.vocab, d)),
            ("final_norm".to_string(), (1, d)),
            ("lm_head".to_string(), (d, c.vocab)),
        ];
        for (l, lay) in self.layout.iter().enumerate() {
            let (aw, kw) = (lay.attn_width(), lay.kv_width(c));
            out.push((layer_key(l, "attn_norm"), (1, d)));
            out.push((layer_key(l, "wq"), (d, aw)));
            out.push((layer_key(l, "wk"), (d, kw)));
            out.push((layer_key(l, "wv"), (d, kw)));
            out.push((layer_key(l, "wo"), (aw, d)));
            out.push((layer_key(l, "ffn_norm"), (1, d)));
            out.push((layer_key(l, "wu"), (d, lay.ffn_dim)));
            out.push((layer_key(l, "wg"), (d, lay.ffn_dim)));
            out.push((layer_key(l, "wd"), (lay.ffn_dim, d)));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layout.len() != self.config.layers {
            return Err(Error::Format(format!(
                "{} layouts for {} layers",
                self.layout.len(),
                self.config.layers
            )));
        }
        for lay in &self.layout {
            lay.validate(&self.config)?;
        }
        let expected = self.expected_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.tensor(&name)?;
            if t.shape() != shape {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Parameters in the seven projection matrices of every layer.
    pub fn prunable_params(&self) -> usize {
        (0..self.config.layers)
            .flat_map(|l| PROJECTIONS.iter().map(move |n| layer_key(l, n)))
            .filter_map(|k| self.tensors.get(&k))
            .map(DenseMatrix::len)
            .sum()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.values().map(DenseMatrix::len).sum()
    }

    /// Round every tensor to storage (`f32`) precision.
    pub fn to_storage_precision(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors.values_mut() {
            *t = t.to_f32_precision();
        }
        out
    }
}
