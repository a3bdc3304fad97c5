//! Global non-uniform pruning ratios.
//!
//! Mask gradients are rotated into a block-wise PCA basis of the activations
//! they act on and squared, giving one importance per rotated unit. FFN
//! units then lose `λ_b · r` of their parameters, attention units lose
//! whatever keeps the total at `r`, and within each group the least
//! important units across all layers go first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headprune::min_head_dim;
use crate::linalg::{sym_eig, BlockDiagonal, DenseMatrix, GramAccumulator};
use crate::tmodel::{ActivationTrace, MaskGradients, ModelConfig};

#[cfg(test)]
mod tests;

/// Per-layer rotations for the attention output and the FFN intermediate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBases {
    pub mha: BlockDiagonal,
    pub ffn: BlockDiagonal,
}

/// Full eigenbasis of every diagonal block of `g`, blocks of `width` (the
/// last one may be narrower).
pub fn block_basis(g: &GramAccumulator, width: usize) -> Result<BlockDiagonal> {
    if width == 0 {
        return Err(Error::Config("sparse PCA block width must be positive".into()));
    }
    let blocks = (0..g.dim)
        .step_by(width)
        .map(|s| Ok(sym_eig(&g.block(s, width.min(g.dim - s)).gram)?.vectors))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockDiagonal::from_blocks(blocks))
}

/// Block-wise PCA bases for every layer of a dense trace: one block per head
/// for attention, blocks of `ffn_block` for the FFN.
pub fn block_sparse_pca(trace: &ActivationTrace, config: &ModelConfig, ffn_block: usize) -> Result<Vec<LayerBases>> {
    (0..config.layers)
        .map(|l| {
            let t = trace.layer(l).ok_or_else(|| Error::Config(format!("trace lacks layer {l}")))?;
            Ok(LayerBases {
                mha: block_basis(&t.o_proj_input.gram, config.head_dim)?,
                ffn: block_basis(&t.down_input.gram, ffn_block)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitImportance {
    pub i_h: Vec<Vec<f64>>,
    pub i_f: Vec<Vec<f64>>,
}

fn rotate_sq(g: &[f64], q: &BlockDiagonal) -> Result<Vec<f64>> {
    let row = DenseMatrix::from_vec(1, g.len(), g.to_vec())?;
    Ok(q.right_apply(&row)?.into_vec().into_iter().map(|v| v * v).collect())
}

/// `I = (g Q_s)²` per unit.
pub fn correct_importance(g: &MaskGradients, bases: &[LayerBases]) -> Result<UnitImportance> {
    if g.g_h.len() != bases.len() || g.g_f.len() != bases.len() {
        return Err(Error::dims("correct_importance", "layer counts differ"));
    }
    let mut i_h = Vec::new();
    let mut i_f = Vec::new();
    for ((gh, gf), b) in g.g_h.iter().zip(&g.g_f).zip(bases) {
        i_h.push(rotate_sq(gh, &b.mha)?);
        i_f.push(rotate_sq(gf, &b.ffn)?);
    }
    Ok(UnitImportance { i_h, i_f })
}

/// Parameters removed with one unit of each group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitCosts {
    pub mha: f64,
    pub ffn: f64,
}

impl UnitCosts {
    /// One attention-output channel carries a `W_q` column and a `W_o` row
    /// plus its share of `W_k` and `W_v`; an FFN channel carries a `W_u`
    /// column, a `W_g` column and a `W_d` row.
    pub fn for_config(c: &ModelConfig) -> Self {
        let d = c.hidden as f64;
        Self { mha: 2.0 * d + 2.0 * d * c.kv_groups as f64 / c.heads as f64, ffn: 3.0 * d }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRatio {
    pub s_h: f64,
    pub s_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPlan {
    pub r: f64,
    pub lambda_b: f64,
    pub cap: f64,
    /// Group ratios after parameter accounting.
    pub r_h: f64,
    pub r_f: f64,
    pub layers: Vec<LayerRatio>,
    /// Parameter sparsity implied by the unit counts.
    pub realized_sparsity: f64,
}

/// Remove the `count` least important units across layers, at most
/// `floor(cap · n_l)` from layer `l`. Returns the removals per layer.
fn select_removals(imp: &[Vec<f64>], count: usize, cap: f64, group: &str) -> Result<Vec<usize>> {
    // Ties are broken by the unit's relative rank within its layer, so equal
    // importances are spread proportionally instead of draining layer 0.
    let mut units: Vec<(f64, f64, usize)> = imp
        .iter()
        .enumerate()
        .flat_map(|(l, v)| {
            let mut order: Vec<usize> = (0..v.len()).collect();
            order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
            let n = v.len() as f64;
            order.into_iter().enumerate().map(move |(rank, i)| (v[i], rank as f64 / n, l))
        })
        .collect();
    units.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let limits: Vec<usize> = imp.iter().map(|v| (cap * v.len() as f64 + 1e-9).floor() as usize).collect();
    let mut removed = vec![0; imp.len()];
    let mut left = count;
    for (_, _, l) in units {
        if left == 0 {
            break;
        }
        if removed[l] < limits[l] {
            removed[l] += 1;
            left -= 1;
        }
    }
    if left > 0 {
        let binding = (0..imp.len()).find(|&l| removed[l] == limits[l]).unwrap_or(0);
        return Err(Error::Infeasible(format!(
            "{group} budget needs {left} more units than the per-layer cap {cap} allows (binding layer {binding})"
        )));
    }
    Ok(removed)
}

/// Split the global sparsity `r` into per-layer attention and FFN ratios.
pub fn allocate_ratios(imp: &UnitImportance, costs: UnitCosts, r: f64, lambda_b: f64, cap: f64) -> Result<RatioPlan> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Config(format!("sparsity {r} must lie in (0, 1)")));
    }
    if !(lambda_b >= 0.0) || !(cap > 0.0 && cap <= 1.0) {
        return Err(Error::Config(format!("need lambda_b ≥ 0 and cap in (0, 1], got {lambda_b}, {cap}")));
    }
    if imp.i_h.len() != imp.i_f.len() {
        return Err(Error::dims("allocate_ratios", "layer counts differ"));
    }
    if imp.i_h.iter().chain(&imp.i_f).flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::NonFinite("unit importance".into()));
    }
    let n_h: usize = imp.i_h.iter().map(Vec::len).sum();
    let n_f: usize = imp.i_f.iter().map(Vec::len).sum();
    let (p_h, p_f) = (n_h as f64 * costs.mha, n_f as f64 * costs.ffn);
    let total = p_h + p_f;
    let r_f = lambda_b * r;
    if r_f > cap {
        return Err(Error::Infeasible(format!("FFN ratio λ_b·r = {r_f} exceeds the cap {cap}")));
    }
    let r_h = (r * total - r_f * p_f) / p_h;
    if !(0.0..=cap).contains(&r_h) {
        return Err(Error::Infeasible(format!("compensating attention ratio {r_h:.4} outside [0, {cap}]")));
    }
    // Unit counts: attention absorbs the FFN rounding, and the FFN count may
    // move by a couple of units when that lands the total closer to `r`.
    let nominal = (r_f * n_f as f64).round() as i64;
    let (k_h, k_f) = (nominal - 2..=nominal + 2)
        .filter(|&k| k >= 0 && k as usize <= n_f)
        .map(|k| {
            let want_h = (r * total - k as f64 * costs.ffn) / costs.mha;
            let k_h = (want_h.round().max(0.0) as usize).min(n_h);
            let err = (k_h as f64 * costs.mha + k as f64 * costs.ffn - r * total).abs();
            (err, (k - nominal).abs(), k_h, k as usize)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, _, h, f)| (h, f))
        .unwrap_or((0, 0));
    let rem_f = select_removals(&imp.i_f, k_f, cap, "FFN")?;
    let rem_h = select_removals(&imp.i_h, k_h, cap, "attention")?;
    let layers = rem_h
        .iter()
        .zip(&rem_f)
        .zip(imp.i_h.iter().zip(&imp.i_f))
        .map(|((&a, &b), (h, f))| LayerRatio { s_h: a as f64 / h.len() as f64, s_f: b as f64 / f.len() as f64 })
        .collect();
    Ok(RatioPlan {
        r,
        lambda_b,
        cap,
        r_h,
        r_f,
        layers,
        realized_sparsity: (k_h as f64 * costs.mha + k_f as f64 * costs.ffn) / total,
    })
}

/// Integer widths for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTargets {
    /// Total attention width `|κ|·p` to aim for.
    pub mha: usize,
    pub ffn: usize,
}

/// Smallest attention width `k·p ≥ want` that a plan can realise with
/// heads no narrower than `min`.
pub fn realizable_mha_width(config: &ModelConfig, want: usize, min: usize) -> usize {
    let hd = config.head_dim;
    let mut best = config.heads * hd;
    for k in 1..=config.heads {
        for p in min..=hd {
            if config.rope_enabled && p % 2 == 1 {
                continue;
            }
            if k * p >= want && k * p < best {
                best = k * p;
            }
        }
    }
    best
}

/// FFN width whose parameter count best matches `params`, kept in `[1, inter]`.
pub fn ffn_width_for(config: &ModelConfig, params: f64) -> usize {
    let per = 3.0 * config.hidden as f64;
    ((params / per).round().max(1.0) as usize).min(config.inter)
}

/// Per-layer integer targets. Attention widths round up to the nearest
/// realisable `k·p` (toward retention); the FFN of each layer absorbs the
/// resulting parameter surplus, carried across layers.
pub fn plan_to_targets(plan: &RatioPlan, config: &ModelConfig) -> Result<Vec<LayerTargets>> {
    plan_to_targets_with(plan, config, min_head_dim(config.head_dim, config.rope_enabled))
}

/// [`plan_to_targets`] with an explicit head-width floor.
pub fn plan_to_targets_with(plan: &RatioPlan, config: &ModelConfig, min_dim: usize) -> Result<Vec<LayerTargets>> {
    if plan.layers.len() != config.layers {
        return Err(Error::dims("plan_to_targets", "plan and config disagree on layers"));
    }
    let costs = UnitCosts::for_config(config);
    let width = config.heads * config.head_dim;
    let mut debt = 0.0;
    let mut out = Vec::new();
    for lr in &plan.layers {
        let want_h = ((1.0 - lr.s_h) * width as f64).round() as usize;
        let mha = realizable_mha_width(config, want_h.max(1), min_dim);
        let want_f = (1.0 - lr.s_f) * config.inter as f64;
        let budget = want_h as f64 * costs.mha + want_f * costs.ffn;
        let ffn_params = budget - mha as f64 * costs.mha - debt;
        let ffn = ffn_width_for(config, ffn_params);
        debt += mha as f64 * costs.mha + ffn as f64 * costs.ffn - budget;
        out.push(LayerTargets { mha, ffn });
    }
    Ok(out)
}
