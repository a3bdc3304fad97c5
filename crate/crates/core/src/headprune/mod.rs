//! Adaptive head compression for attention.
//!
//! Heads are scored by channel importance weighted by how much of their
//! output energy survives at width `p`. The least useful heads are removed
//! greedily, and each survivor is compressed to a shared width `p`:
//!
//! * `q1` compresses queries and keys (rotary pair selection, or a PCA basis
//!   without rotary embedding),
//! * `q2` compresses values head by head (block diagonal),
//! * `q2_star` is a dense ridge map back to the full attention output, which
//!   lets surviving heads stand in for removed ones.
//!
//! All three fold into `W_q`, `W_k`, `W_v` and `W_o`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pca_basis, ridge_solve, ridge_solve_normal, sym_eig, BlockDiagonal, DenseMatrix, GramAccumulator, Ridge};
use crate::tmodel::{Checkpoint, LayerTrace, ModelConfig};


/// Smallest width a surviving head may be compressed to: three quarters of
/// the original, rounded up (and up to even under rotary embedding).
pub fn min_head_dim(head_dim: usize, rope: bool) -> usize {
    min_head_dim_ratio(head_dim, rope, 0.75)
}

/// [`min_head_dim`] with an arbitrary fraction of the original width.
pub fn min_head_dim_ratio(head_dim: usize, rope: bool, ratio: f64) -> usize {
    let m = ((ratio.clamp(0.0, 1.0) * head_dim as f64) - 1e-9).ceil().max(1.0) as usize;
    if rope {
        (m + m % 2).min(head_dim)
    } else {
        m.min(head_dim)
    }
}

/// `I_i = ‖X_{:,i}‖² · ‖W_{i,:}‖²` for every input channel of `W`.
pub fn channel_importance(x: &DenseMatrix, w: &DenseMatrix) -> Result<Vec<f64>> {
    if x.cols() != w.rows() {
        return Err(Error::dims("channel_importance", format!("X has {} columns, W has {} rows", x.cols(), w.rows())));
    }
    Ok(x.column_norms_sq().iter().zip(w.row_norms_sq()).map(|(a, b)| a * b).collect())
}

/// [`channel_importance`] with the column norms read off a Gram diagonal.
pub fn channel_importance_gram(g: &GramAccumulator, w: &DenseMatrix) -> Result<Vec<f64>> {
    if g.dim != w.rows() {
        return Err(Error::dims("channel_importance", format!("Gram of dim {}, W has {} rows", g.dim, w.rows())));
    }
    Ok(g.gram.diagonal().iter().zip(w.row_norms_sq()).map(|(a, b)| a * b).collect())
}

/// Importance retained when a head is compressed to its top `p` principal
/// directions: `R · Σ V[..p] / Σ V`.
pub fn head_recon_score(r: f64, v: &[f64], p: usize) -> f64 {
    let total: f64 = v.iter().map(|x| x.max(0.0)).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let kept: f64 = v.iter().take(p).map(|x| x.max(0.0)).sum();
    r * kept / total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub head: usize,
    /// Sum of the head's channel importances.
    pub r: f64,
    /// Descending eigenvalues of the head's output Gram block.
    pub eigenvalues: Vec<f64>,
    pub channel_importance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub head_dim: usize,
    pub heads: Vec<HeadScore>,
}

impl HeadScoreTable {
    /// Table from bare `R_h` values and spectra.
    pub fn from_parts(head_dim: usize, r: &[f64], spectra: &[Vec<f64>]) -> Self {
        let heads = r
            .iter()
            .zip(spectra)
            .enumerate()
            .map(|(h, (&r, v))| HeadScore {
                head: h,
                r,
                eigenvalues: v.clone(),
                channel_importance: vec![r / head_dim as f64; head_dim],
            })
            .collect();
        Self { head_dim, heads }
    }

    /// Score every head from the Gram of the attention output and `W_o`.
    pub fn from_gram(x_o: &GramAccumulator, w_o: &DenseMatrix, head_dim: usize) -> Result<Self> {
        let imp = channel_importance_gram(x_o, w_o)?;
        if !x_o.dim.is_multiple_of(head_dim) {
            return Err(Error::dims("HeadScoreTable", format!("width {} not a multiple of {head_dim}", x_o.dim)));
        }
        let heads = (0..x_o.dim / head_dim)
            .map(|h| {
                let ci = imp[h * head_dim..(h + 1) * head_dim].to_vec();
                let eig = sym_eig(&x_o.block(h * head_dim, head_dim).gram)?;
                Ok(HeadScore {
                    head: h,
                    r: ci.iter().sum(),
                    eigenvalues: eig.values.iter().map(|v| v.max(0.0)).collect(),
                    channel_importance: ci,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { head_dim, heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Total reconstruction score of `kept` heads at width `p`.
    pub fn total_score(&self, kept: &[usize], p: usize) -> f64 {
        kept.iter().map(|&h| head_recon_score(self.heads[h].r, &self.heads[h].eigenvalues, p)).sum()
    }

}

/// Which heads survive and at what width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub removed: Vec<usize>,
    /// Surviving heads, ascending.
    pub kept: Vec<usize>,
    pub p: usize,
    /// Requested total attention width.
    pub target_p: usize,
}

impl CompressionPlan {
    pub fn full(heads: usize, head_dim: usize) -> Self {
        Self { removed: vec![], kept: (0..heads).collect(), p: head_dim, target_p: heads * head_dim }
    }

    /// Realised attention width `|κ| · p`.
    pub fn width(&self) -> usize {
        self.kept.len() * self.p
    }

    pub fn is_lossless(&self, head_dim: usize) -> bool {
        self.removed.is_empty() && self.p == head_dim
    }
}

/// Width per head when `kept` heads share a budget of `target` channels.
fn width_for(target: usize, kept: usize, head_dim: usize, even: bool) -> usize {
    let p = (target / kept).min(head_dim);
    if even {
        p - p % 2
    } else {
        p
    }
}

/// Greedily drop the weakest head while doing so raises the total
/// reconstruction score; heads are also dropped unconditionally while the
/// shared width would fall below `min_dim`.
pub fn greedy_remove(scores: &HeadScoreTable, target_p: usize, min_dim: usize, even: bool) -> Result<CompressionPlan> {
    let hd = scores.head_dim;
    if scores.is_empty() {
        return Err(Error::Infeasible("no heads to plan over".into()));
    }
    if width_for(target_p, 1, hd, even) < min_dim.max(1) {
        return Err(Error::Infeasible(format!(
            "attention target {target_p} cannot hold one head of width {min_dim}"
        )));
    }
    let mut kept: Vec<usize> = (0..scores.len()).collect();
    let mut removed = Vec::new();
    while kept.len() > 1 {
        // Weakest head; ties go to the later index.
        let pos = (0..kept.len())
            .rev()
            .min_by(|&a, &b| scores.heads[kept[a]].r.total_cmp(&scores.heads[kept[b]].r))
            .expect("nonempty");
        let p = width_for(target_p, kept.len(), hd, even);
        if p >= min_dim.max(1) {
            if p >= hd {
                break;
            }
            let rest: Vec<usize> = kept.iter().copied().filter(|&h| h != kept[pos]).collect();
            let p_star = width_for(target_p, rest.len(), hd, even);
            let before = scores.total_score(&kept, p);
            let after = scores.total_score(&rest, p_star);
            if after - before <= 0.0 {
                break;
            }
            assert!(after > before, "head removal must raise the score estimate");
        }
        removed.push(kept.remove(pos));
    }
    let p = width_for(target_p, kept.len(), hd, even);
    removed.sort_unstable();
    Ok(CompressionPlan { removed, kept, p, target_p })
}

/// Query/key compression of every surviving head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Q1 {
    /// Per surviving head, which rotary pairs are kept.
    PairSelect { masks: Vec<Vec<bool>> },
    /// Per surviving head, a `head_dim × p` orthonormal basis.
    Dense { bases: Vec<DenseMatrix> },
}

impl Q1 {
    /// `head_dim × p` matrix of the `i`-th surviving head.
    pub fn matrix(&self, i: usize) -> DenseMatrix {
        match self {
            Q1::PairSelect { masks } => crate::tmodel::rope::pair_selection_matrix(&masks[i]),
            Q1::Dense { bases } => bases[i].clone(),
        }
    }

    pub fn masks(&self) -> Option<&[Vec<bool>]> {
        match self {
            Q1::PairSelect { masks } => Some(masks),
            Q1::Dense { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhaTransforms {
    pub q1: Q1,
    /// One `head_dim × p` block per surviving head.
    pub q2: BlockDiagonal,
    /// `(|κ|·p) × (H·head_dim)` map back to the full attention output.
    pub q2_star: DenseMatrix,
}

impl MhaTransforms {
    /// Transforms that leave a dense layer unchanged.
    pub fn identity(config: &ModelConfig) -> Self {
        let hd = config.head_dim;
        let q1 = if config.rope_enabled {
            Q1::PairSelect { masks: vec![vec![true; hd / 2]; config.heads] }
        } else {
            Q1::Dense { bases: vec![DenseMatrix::identity(hd); config.heads] }
        };
        Self {
            q1,
            q2: BlockDiagonal::from_blocks(vec![DenseMatrix::identity(hd); config.heads]),
            q2_star: DenseMatrix::identity(config.heads * hd),
        }
    }
}

/// Surviving heads grouped by KV group, in group order.
fn kept_by_group(config: &ModelConfig, kept: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
    for &h in kept {
        let g = config.group_of(h);
        match out.last_mut() {
            Some((lg, hs)) if *lg == g => hs.push(h),
            _ => out.push((g, vec![h])),
        }
    }
    out
}

/// Rotary pair importance of one KV group: for pair `(j, j + hd/2)`, the sum
/// over surviving heads of `‖q_c‖² · ‖k_c‖²` on both channels.
pub fn pair_importance(q_diag: &[f64], k_diag: &[f64], heads: &[usize], group: usize, head_dim: usize) -> Vec<f64> {
    let half = head_dim / 2;
    (0..half)
        .map(|j| {
            heads
                .iter()
                .map(|&h| {
                    [j, j + half]
                        .iter()
                        .map(|&c| q_diag[h * head_dim + c] * k_diag[group * head_dim + c])
                        .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

/// Mask keeping the `count` highest-scoring pairs; ties go to the lower index.
fn top_pairs(scores: &[f64], count: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &j in order.iter().take(count) {
        mask[j] = true;
    }
    mask
}

/// Build `q1` from the Grams of the pre-rotary query and key projections
/// (all original heads / groups). Heads sharing a KV group share `q1`.
pub fn build_q1(q_out: &GramAccumulator, k_out: &GramAccumulator, config: &ModelConfig, plan: &CompressionPlan) -> Result<Q1> {
    let hd = config.head_dim;
    if q_out.dim != config.heads * hd || k_out.dim != config.kv_groups * hd {
        return Err(Error::dims("build_q1", "q/k Grams must cover the dense layer"));
    }
    let groups = kept_by_group(config, &plan.kept);
    if config.rope_enabled {
        if !plan.p.is_multiple_of(2) {
            return Err(Error::OutOfRange { what: "head width", detail: format!("p={} is odd under rotary embedding", plan.p) });
        }
        let (qd, kd) = (q_out.gram.diagonal(), k_out.gram.diagonal());
        let mut masks = Vec::new();
        for (g, heads) in &groups {
            let m = top_pairs(&pair_importance(&qd, &kd, heads, *g, hd), plan.p / 2);
            masks.extend(std::iter::repeat_n(m, heads.len()));
        }
        Ok(Q1::PairSelect { masks })
    } else {
        let mut bases = Vec::new();
        for (g, heads) in &groups {
            let mut pooled = k_out.block(g * hd, hd);
            for &h in heads {
                pooled.merge(&q_out.block(h * hd, hd))?;
            }
            let b = pca_basis(&pooled, plan.p)?;
            bases.extend(std::iter::repeat_n(b, heads.len()));
        }
        Ok(Q1::Dense { bases })
    }
}

/// Per surviving head, the top-`p` PCA basis of its output block, pooled
/// over the surviving heads of its KV group.
pub fn build_q2(x_o: &GramAccumulator, config: &ModelConfig, plan: &CompressionPlan) -> Result<BlockDiagonal> {
    let hd = config.head_dim;
    if x_o.dim != config.heads * hd {
        return Err(Error::dims("build_q2", "attention-output Gram must cover the dense layer"));
    }
    let mut blocks = Vec::new();
    for (_, heads) in kept_by_group(config, &plan.kept) {
        let mut pooled = GramAccumulator::zero(hd);
        for &h in &heads {
            pooled.merge(&x_o.block(h * hd, hd))?;
        }
        let b = pca_basis(&pooled, plan.p)?;
        blocks.extend(std::iter::repeat_n(b, heads.len()));
    }
    Ok(BlockDiagonal::from_blocks(blocks))
}

fn kept_channels(kept: &[usize], head_dim: usize) -> Vec<usize> {
    kept.iter().flat_map(|&h| h * head_dim..(h + 1) * head_dim).collect()
}

/// Dense output correction `((X Q2)ᵀ X Q2 + λI)⁻¹ (X Q2)ᵀ X_full`, where `X`
/// holds the surviving heads' columns of the attention output, from rows.
pub fn correct_q2(q2: &BlockDiagonal, x_o: &DenseMatrix, kept: &[usize], head_dim: usize, lambda: Ridge) -> Result<DenseMatrix> {
    if x_o.rows() == 0 {
        return Err(Error::OutOfRange { what: "attention-output sample", detail: "no rows".into() });
    }
    let xk = x_o.select_columns(&kept_channels(kept, head_dim));
    let z = q2.right_apply(&xk)?;
    ridge_solve(&z, x_o, lambda)
}

/// [`correct_q2`] from the attention-output Gram (exact over every row seen).
pub fn correct_q2_gram(q2: &BlockDiagonal, x_o: &GramAccumulator, kept: &[usize], head_dim: usize, lambda: Ridge) -> Result<DenseMatrix> {
    let idx = kept_channels(kept, head_dim);
    if q2.rows() != idx.len() {
        return Err(Error::dims("correct_q2", format!("q2 has {} rows for {} kept channels", q2.rows(), idx.len())));
    }
    let q = q2.to_dense();
    let g_kept = x_o.gram.select_rows(&idx);
    let atb = q.t_mul(&g_kept);
    let ata = atb.select_columns(&idx).mul(&q).symmetrized();
    ridge_solve_normal(&ata, &atb, lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MhaOptions {
    pub ridge: Ridge,
    /// Overrides [`min_head_dim`].
    pub min_head_dim: Option<usize>,
}

impl Default for MhaOptions {
    fn default() -> Self {
        Self { ridge: Ridge::Auto, min_head_dim: None }
    }
}

/// Everything decided for one attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhaCompression {
    pub scores: HeadScoreTable,
    pub plan: CompressionPlan,
    pub transforms: MhaTransforms,
}

/// Score, plan and build transforms for one dense attention layer whose
/// activations are in `trace`. A target covering the whole layer yields the
/// identity transforms.
pub fn compress_mha(
    ckpt: &Checkpoint,
    layer: usize,
    trace: &LayerTrace,
    target_p: usize,
    opts: &MhaOptions,
) -> Result<MhaCompression> {
    let cfg = &ckpt.config;
    let hd = cfg.head_dim;
    let scores = HeadScoreTable::from_gram(&trace.o_proj_input.gram, ckpt.layer_tensor(layer, "wo")?, hd)?;
    if target_p >= cfg.heads * hd {
        return Ok(MhaCompression {
            scores,
            plan: CompressionPlan::full(cfg.heads, hd),
            transforms: MhaTransforms::identity(cfg),
        });
    }
    let min_dim = opts.min_head_dim.unwrap_or_else(|| min_head_dim(hd, cfg.rope_enabled));
    let plan = greedy_remove(&scores, target_p, min_dim, cfg.rope_enabled)?;
    let q1 = build_q1(&trace.q_out.gram, &trace.k_out.gram, cfg, &plan)?;
    let q2 = build_q2(&trace.o_proj_input.gram, cfg, &plan)?;
    let q2_star = match correct_q2_gram(&q2, &trace.o_proj_input.gram, &plan.kept, hd, opts.ridge) {
        Err(Error::Singular { .. }) if opts.ridge != Ridge::Auto => {
            log::warn!("layer {layer}: singular output correction, retrying with auto damping");
            correct_q2_gram(&q2, &trace.o_proj_input.gram, &plan.kept, hd, Ridge::Auto)?
        }
        r => r?,
    };
    Ok(MhaCompression { scores, plan, transforms: MhaTransforms { q1, q2, q2_star } })
}

/// Fold the transforms into the weights of a dense attention layer and
/// update its layout.
pub fn fuse_mha(ckpt: &mut Checkpoint, layer: usize, plan: &CompressionPlan, t: &MhaTransforms) -> Result<()> {
    let cfg = ckpt.config.clone();
    let hd = cfg.head_dim;
    let lay = &ckpt.layout[layer];
    if lay.retained_heads.len() != cfg.heads || lay.per_head_dim != hd {
        return Err(Error::dims("fuse_mha", format!("layer {layer} attention is already compressed")));
    }
    let (k, p) = (plan.kept.len(), plan.p);
    if t.q2.rows() != k * hd || t.q2.cols() != k * p || t.q2_star.shape() != (k * p, cfg.heads * hd) {
        return Err(Error::dims("fuse_mha", "transforms do not match the plan"));
    }
    let q1_mats: Vec<DenseMatrix> = (0..k).map(|i| t.q1.matrix(i)).collect();
    if q1_mats.iter().any(|m| m.shape() != (hd, p)) {
        return Err(Error::dims("fuse_mha", "q1 block shape"));
    }
    let q2_blocks = t.q2.blocks();
    let wq = ckpt.layer_tensor(layer, "wq")?;
    let wk = ckpt.layer_tensor(layer, "wk")?;
    let wv = ckpt.layer_tensor(layer, "wv")?;
    let wo = ckpt.layer_tensor(layer, "wo")?;

    let q_parts: Vec<DenseMatrix> =
        plan.kept.iter().zip(&q1_mats).map(|(&h, q1)| wq.column_block(h * hd, hd).mul(q1)).collect();
    let mut k_parts = Vec::new();
    let mut v_parts = Vec::new();
    let mut i = 0;
    for (g, heads) in kept_by_group(&cfg, &plan.kept) {
        k_parts.push(wk.column_block(g * hd, hd).mul(&q1_mats[i]));
        v_parts.push(wv.column_block(g * hd, hd).mul(&q2_blocks[i].matrix));
        i += heads.len();
    }
    let cat = |v: Vec<DenseMatrix>| -> Result<DenseMatrix> { DenseMatrix::hstack(&v.iter().collect::<Vec<_>>()) };
    let new_q = cat(q_parts)?;
    let new_k = cat(k_parts)?;
    let new_v = cat(v_parts)?;
    let new_o = t.q2_star.mul(wo);

    ckpt.set_layer_tensor(layer, "wq", new_q);
    ckpt.set_layer_tensor(layer, "wk", new_k);
    ckpt.set_layer_tensor(layer, "wv", new_v);
    ckpt.set_layer_tensor(layer, "wo", new_o);
    let lay = &mut ckpt.layout[layer];
    lay.retained_heads = plan.kept.clone();
    lay.per_head_dim = p;
    lay.rope_pair_mask = t.q1.masks().map(<[Vec<bool>]>::to_vec);
    lay.validate(&cfg)?;
    Ok(())
}

/// Attention parameters implied by a plan: `q`, `o` scale with the surviving
/// heads, `k`, `v` with the surviving KV groups.
pub fn mha_params(config: &ModelConfig, plan: &CompressionPlan) -> usize {
    let groups = kept_by_group(config, &plan.kept).len();
    let d = config.hidden;
    2 * d * plan.kept.len() * plan.p + 2 * d * groups * plan.p
}
