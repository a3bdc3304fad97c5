//! The unfused reference: original dense weights with every transform applied
//! to activations at run time. Agreement with the fused checkpoint is the
//! fuse check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffnprune::{fuse_ffn, FfnTransforms};
use crate::headprune::{fuse_mha, CompressionPlan, MhaTransforms};
use crate::linalg::DenseMatrix;
use crate::tmodel::{attention, embed, positions, rms_norm, silu, AttnSpec, Checkpoint, LayerLayout, ModelConfig, TokenBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTransforms {
    pub plan: CompressionPlan,
    pub mha: MhaTransforms,
    pub ffn: FfnTransforms,
}

/// Every transform of a run, in layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformsLog {
    pub config: ModelConfig,
    pub layers: Vec<LayerTransforms>,
}

impl TransformsLog {
    pub fn identity(config: &ModelConfig) -> Self {
        let layer = LayerTransforms {
            plan: CompressionPlan::full(config.heads, config.head_dim),
            mha: MhaTransforms::identity(config),
            ffn: FfnTransforms::identity(config.inter),
        };
        Self { config: config.clone(), layers: vec![layer; config.layers] }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn check(&self, original: &Checkpoint) -> Result<()> {
        if self.config != original.config || self.layers.len() != original.config.layers {
            return Err(Error::Config("transforms log does not belong to this checkpoint".into()));
        }
        if original.layout.iter().any(|l| *l != LayerLayout::dense(&original.config)) {
            return Err(Error::Config("the reference checkpoint must be dense".into()));
        }
        Ok(())
    }
}

/// Fold a whole log into a dense checkpoint.
pub fn fuse_all(original: &Checkpoint, log: &TransformsLog) -> Result<Checkpoint> {
    log.check(original)?;
    let mut out = original.clone();
    for (l, t) in log.layers.iter().enumerate() {
        fuse_mha(&mut out, l, &t.plan, &t.mha)?;
        fuse_ffn(&mut out, l, &t.ffn)?;
    }
    Ok(out)
}

/// Heads of one KV group share `q1` and their `q2` blocks.
pub fn group_sharing_holds(config: &ModelConfig, t: &LayerTransforms) -> bool {
    let blocks = t.mha.q2.blocks();
    let kept = &t.plan.kept;
    (0..kept.len()).all(|i| {
        (i + 1..kept.len()).all(|j| {
            config.group_of(kept[i]) != config.group_of(kept[j])
                || (t.mha.q1.matrix(i) == t.mha.q1.matrix(j) && blocks[i].matrix == blocks[j].matrix)
        })
    })
}

fn layer_online(
    ckpt: &Checkpoint,
    l: usize,
    t: &LayerTransforms,
    x: &DenseMatrix,
    pos: &[usize],
    nb: usize,
    seq: usize,
) -> Result<DenseMatrix> {
    let cfg = &ckpt.config;
    let hd = cfg.head_dim;
    let w = |n: &str| ckpt.layer_tensor(l, n);
    let (h, _) = rms_norm(x, w("attn_norm")?);
    // Rotate at full width, then compress: exercises the commutation the
    // fused weights rely on.
    let dense = AttnSpec::from_layout(cfg, &LayerLayout::dense(cfg));
    let q = dense.rotate_q(&h.mul(w("wq")?), pos, false)?;
    let k = dense.rotate_k(&h.mul(w("wk")?), pos, false)?;
    let v = h.mul(w("wv")?);

    let kept = &t.plan.kept;
    let q1: Vec<DenseMatrix> = (0..kept.len()).map(|i| t.mha.q1.matrix(i)).collect();
    let q2 = t.mha.q2.blocks();
    let mut q_parts = Vec::new();
    let mut k_parts = Vec::new();
    let mut v_parts = Vec::new();
    let mut last_group = None;
    for (i, &head) in kept.iter().enumerate() {
        q_parts.push(q.column_block(head * hd, hd).mul(&q1[i]));
        let g = cfg.group_of(head);
        if last_group != Some(g) {
            k_parts.push(k.column_block(g * hd, hd).mul(&q1[i]));
            v_parts.push(v.column_block(g * hd, hd).mul(&q2[i].matrix));
            last_group = Some(g);
        }
    }
    let cat = |v: &[DenseMatrix]| DenseMatrix::hstack(&v.iter().collect::<Vec<_>>());
    let layout = LayerLayout {
        retained_heads: kept.clone(),
        per_head_dim: t.plan.p,
        rope_pair_mask: None,
        ffn_dim: t.ffn.width(),
    };
    let spec = AttnSpec::from_layout(cfg, &layout);
    let (xo, _) = attention(&spec, &cat(&q_parts)?, &cat(&k_parts)?, &cat(&v_parts)?, nb, seq, false);
    let x_mid = x.add(&xo.mul(&t.mha.q2_star).mul(w("wo")?))?;

    let (h2, _) = rms_norm(&x_mid, w("ffn_norm")?);
    let u = h2.mul(w("wu")?).mul(&t.ffn.qc);
    let g = h2.mul(w("wg")?).mul(&t.ffn.qc);
    let a = u.hadamard(&g.map(silu))?;
    x_mid.add(&a.mul(&t.ffn.qr).mul(w("wd")?))
}

/// Logits of the dense `original` with the logged transforms applied online.
pub fn online_logits(original: &Checkpoint, log: &TransformsLog, batch: &TokenBatch) -> Result<DenseMatrix> {
    log.check(original)?;
    let (nb, seq) = (batch.batch_size(), batch.seq_len());
    if let Some(&bad) = batch.seqs().iter().flatten().find(|&&t| t as usize >= original.config.vocab) {
        return Err(Error::OutOfRange { what: "token id", detail: format!("{bad}") });
    }
    let pos = positions(batch, 0);
    let mut x = embed(original, batch)?;
    for (l, t) in log.layers.iter().enumerate() {
        x = layer_online(original, l, t, &x, &pos, nb, seq)?;
    }
    let (hf, _) = rms_norm(&x, original.tensor("final_norm")?);
    Ok(hf.mul(original.tensor("lm_head")?))
}

/// Worst max-abs logit difference between `pruned` and the online model over
/// `trials` random batches.
pub fn fuse_check(original: &Checkpoint, pruned: &Checkpoint, log: &TransformsLog, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Config("fuse check needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf05e);
    let vocab = original.config.vocab as u32;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let seqs = (0..2).map(|_| (0..16).map(|_| rng.random_range(0..vocab)).collect()).collect();
        let batch = TokenBatch::new(seqs)?;
        let fused = crate::tmodel::logits(pruned, &batch)?;
        let online = online_logits(original, log, &batch)?;
        let d = fused.max_abs_diff(&online);
        if !d.is_finite() {
            return Err(Error::NonFinite("fuse check logits".into()));
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

/// [`fuse_check`] that fails with [`Error::FuseCheck`] above `tolerance`.
pub fn verify_fusion(
    original: &Checkpoint,
    pruned: &Checkpoint,
    log: &TransformsLog,
    trials: usize,
    seed: u64,
    tolerance: f64,
) -> Result<f64> {
    let divergence = fuse_check(original, pruned, log, trials, seed)?;
    if divergence > tolerance {
        return Err(Error::FuseCheck { divergence, tolerance });
    }
    Ok(divergence)
}
