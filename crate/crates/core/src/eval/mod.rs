//! Measurements and comparators: residual-stream rank profiles, an online
//! inter-module PCA probe, random and magnitude pruning baselines, and
//! plot-ready report tables.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffnprune::{fuse_ffn, selection_matrix, top_channels, FfnTransforms};
use crate::headprune::{channel_importance_gram, fuse_mha, mha_params, pair_importance, CompressionPlan, MhaTransforms, Q1};
use crate::linalg::{energy_rank, pca_basis, sym_eig, BlockDiagonal, DenseMatrix};
use crate::pipeline::{LayerTransforms, TransformsLog};
use crate::tmodel::{capture_trace, CaptureOptions, Checkpoint, Hooks, LayerLayout, ModelConfig, TokenBatch};

#[cfg(test)]
mod tests;

/// Energy threshold of the rank profiles.
pub const DEFAULT_TAU: f64 = 0.99;

/// Per layer, the energy rank of the block output (the residual stream
/// leaving the block).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankProfile {
    pub label: String,
    pub ranks: Vec<usize>,
}

impl RankProfile {
    /// `Σ_{l ≥ from} |rank_l − base_l|`.
    pub fn perturbation(&self, base: &RankProfile, from: usize) -> usize {
        self.ranks.iter().zip(&base.ranks).skip(from).map(|(a, b)| a.abs_diff(*b)).sum()
    }
}

/// Rank profile under optional forward hooks.
pub fn rank_profile_with(
    ckpt: &Checkpoint,
    calib: &[TokenBatch],
    tau: f64,
    hooks: Hooks<'_>,
    label: impl Into<String>,
) -> Result<RankProfile> {
    if calib.is_empty() {
        return Err(Error::Config("rank profile needs calibration data".into()));
    }
    // Only the Gram is needed; keep the row sample minimal.
    let trace = capture_trace(ckpt, calib, &CaptureOptions { layers: None, row_cap: 1 }, hooks)?;
    let ranks = trace
        .layers
        .iter()
        .map(|t| {
            let g = &t.as_ref().expect("all layers captured").block_output.gram;
            energy_rank(&sym_eig(&g.gram)?.values, tau)
        })
        .collect::<Result<_>>()?;
    Ok(RankProfile { label: label.into(), ranks })
}

/// Rank profile of a checkpoint, labelled `dense` or `intra_pruned`.
pub fn rank_profile(ckpt: &Checkpoint, calib: &[TokenBatch], tau: f64) -> Result<RankProfile> {
    let dense = ckpt.layout.iter().all(|l| *l == LayerLayout::dense(&ckpt.config));
    rank_profile_with(ckpt, calib, tau, Hooks::default(), if dense { "dense" } else { "intra_pruned" })
}

/// Residual-stream projections onto the top `(1 − s)·D` PCA directions at
/// chosen block boundaries, applied online. The weights are never touched.
#[derive(Clone, Debug, PartialEq)]
pub struct InterProbe {
    pub sparsity: f64,
    pub layers: Vec<usize>,
    pub maps: Vec<Option<DenseMatrix>>,
}

impl InterProbe {
    pub fn hooks(&self) -> Hooks<'_> {
        Hooks { residual_maps: Some(&self.maps), ..Hooks::default() }
    }

    pub fn logits(&self, ckpt: &Checkpoint, batch: &TokenBatch) -> Result<DenseMatrix> {
        crate::tmodel::forward_with(ckpt, batch, self.hooks())
    }

    pub fn profile(&self, ckpt: &Checkpoint, calib: &[TokenBatch], tau: f64) -> Result<RankProfile> {
        rank_profile_with(ckpt, calib, tau, self.hooks(), "inter_probe")
    }
}

/// Build the probe; projectors are fitted in layer order, each on the stream
/// already truncated upstream.
pub fn inter_pca_probe(ckpt: &Checkpoint, calib: &[TokenBatch], sparsity: f64, layers: &[usize]) -> Result<InterProbe> {
    let cfg = &ckpt.config;
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("probe sparsity {sparsity} must lie in [0, 1)")));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= cfg.layers) {
        return Err(Error::Config(format!("probe layer {bad} out of range (model has {} layers)", cfg.layers)));
    }
    let mut set = layers.to_vec();
    set.sort_unstable();
    set.dedup();
    let d = cfg.hidden;
    let k = (((1.0 - sparsity) * d as f64).round() as usize).clamp(1, d);
    let mut maps: Vec<Option<DenseMatrix>> = vec![None; cfg.layers];
    if k < d {
        for &l in &set {
            let opts = CaptureOptions { layers: Some(vec![l]), row_cap: 1 };
            let hooks = Hooks { residual_maps: Some(&maps), ..Hooks::default() };
            let trace = capture_trace(ckpt, calib, &opts, hooks)?;
            let u = pca_basis(&trace.layer(l).expect("captured").block_output.gram, k)?;
            maps[l] = Some(u.mul_t(&u));
        }
    }
    Ok(InterProbe { sparsity, layers: set, maps })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Uniformly random channels.
    Random,
    /// Largest `‖X col‖² · ‖W row‖²` channels.
    Magnitude,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub sparsity: f64,
    pub seed: u64,
}

/// Per-head width kept by the baselines: every head stays, shrunk to
/// `(1 − s)·head_dim` (even under rotary embedding, at least one pair).
pub fn baseline_head_width(cfg: &ModelConfig, sparsity: f64) -> usize {
    let hd = cfg.head_dim;
    let p = ((1.0 - sparsity) * hd as f64).round() as usize;
    if cfg.rope_enabled {
        (p + p % 2).clamp(2, hd)
    } else {
        p.clamp(1, hd)
    }
}

fn pick(scores: Option<&[f64]>, n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match scores {
        Some(s) => top_channels(s, count),
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let mut sel = idx[..count].to_vec();
            sel.sort_unstable();
            sel
        }
    }
}

fn mask_of(half: usize, pairs: &[usize]) -> Vec<bool> {
    let mut m = vec![false; half];
    for &j in pairs {
        m[j] = true;
    }
    m
}

/// Prune by channel deletion only: no PCA, no ridge. Each layer keeps
/// `1 − s` of its projection parameters; every head survives at a uniform
/// reduced width and the FFN width absorbs the rounding.
pub fn baseline_prune(ckpt: &Checkpoint, calib: &[TokenBatch], spec: &BaselineSpec) -> Result<(Checkpoint, TransformsLog)> {
    let cfg = ckpt.config.clone();
    if !(0.0..1.0).contains(&spec.sparsity) {
        return Err(Error::Config(format!("baseline sparsity {} must lie in [0, 1)", spec.sparsity)));
    }
    if ckpt.layout.iter().any(|l| *l != LayerLayout::dense(&cfg)) {
        return Err(Error::Config("baselines need a dense checkpoint".into()));
    }
    let mut log = TransformsLog::identity(&cfg);
    if spec.sparsity == 0.0 {
        return Ok((ckpt.clone(), log));
    }
    let magnitude = spec.kind == BaselineKind::Magnitude;
    let trace = if magnitude {
        if calib.is_empty() {
            return Err(Error::Config("magnitude baseline needs calibration data".into()));
        }
        Some(capture_trace(ckpt, calib, &CaptureOptions { layers: None, row_cap: 1 }, Hooks::default())?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xba5e);
    let (hd, d) = (cfg.head_dim, cfg.hidden);
    let p = baseline_head_width(&cfg, spec.sparsity);
    let layer_params = 2 * d * cfg.heads * hd + 2 * d * cfg.kv_groups * hd + 3 * d * cfg.inter;
    let keep = (1.0 - spec.sparsity) * layer_params as f64;
    let mut out = ckpt.clone();
    let mut debt = 0.0;
    for l in 0..cfg.layers {
        let t = trace.as_ref().map(|t| t.layer(l).expect("captured"));
        let plan = CompressionPlan { removed: vec![], kept: (0..cfg.heads).collect(), p, target_p: cfg.heads * p };
        let v_imp = t
            .map(|t| channel_importance_gram(&t.o_proj_input.gram, ckpt.layer_tensor(l, "wo")?))
            .transpose()?;
        let (qd, kd) = match t {
            Some(t) => (Some(t.q_out.gram.gram.diagonal()), Some(t.k_out.gram.gram.diagonal())),
            None => (None, None),
        };
        let mut q1_mats = Vec::new();
        let mut masks = Vec::new();
        let mut v_blocks = Vec::new();
        let mut star = DenseMatrix::zeros(cfg.heads * p, cfg.heads * hd);
        for g in 0..cfg.kv_groups {
            let heads: Vec<usize> = (0..cfg.heads).filter(|&h| cfg.group_of(h) == g).collect();
            let qk_scores = qd.as_ref().zip(kd.as_ref()).map(|(q, k)| {
                if cfg.rope_enabled {
                    pair_importance(q, k, &heads, g, hd)
                } else {
                    (0..hd).map(|c| heads.iter().map(|&h| q[h * hd + c] * k[g * hd + c]).sum()).collect()
                }
            });
            let v_scores: Option<Vec<f64>> =
                v_imp.as_ref().map(|v| (0..hd).map(|c| heads.iter().map(|&h| v[h * hd + c]).sum()).collect());
            let (q1, mask) = if cfg.rope_enabled {
                let pairs = pick(qk_scores.as_deref(), hd / 2, p / 2, &mut rng);
                let m = mask_of(hd / 2, &pairs);
                (crate::tmodel::rope::pair_selection_matrix(&m), Some(m))
            } else {
                (selection_matrix(hd, &pick(qk_scores.as_deref(), hd, p, &mut rng)), None)
            };
            let vsel = selection_matrix(hd, &pick(v_scores.as_deref(), hd, p, &mut rng));
            for &h in &heads {
                q1_mats.push(q1.clone());
                masks.extend(mask.clone());
                v_blocks.push(vsel.clone());
                star.set_submatrix(h * p, h * hd, &vsel.transpose());
            }
        }
        let q1 = if cfg.rope_enabled { Q1::PairSelect { masks } } else { Q1::Dense { bases: q1_mats } };
        let mha = MhaTransforms { q1, q2: BlockDiagonal::from_blocks(v_blocks), q2_star: star };
        fuse_mha(&mut out, l, &plan, &mha).map_err(|e| e.at(l, "baseline attention"))?;

        let mha_kept = mha_params(&cfg, &plan);
        let f = crate::globalratio::ffn_width_for(&cfg, keep - mha_kept as f64 - debt);
        debt += (mha_kept + crate::ffnprune::ffn_params(d, f)) as f64 - keep;
        let f_imp = t
            .map(|t| channel_importance_gram(&t.down_input.gram, ckpt.layer_tensor(l, "wd")?))
            .transpose()?;
        let sel = pick(f_imp.as_deref(), cfg.inter, f, &mut rng);
        let qc = selection_matrix(cfg.inter, &sel);
        let ffn = FfnTransforms { qr: qc.transpose(), qc, selected: sel };
        fuse_ffn(&mut out, l, &ffn).map_err(|e| e.at(l, "baseline ffn"))?;
        log.layers[l] = LayerTransforms { plan, mha, ffn };
    }
    Ok((out.to_storage_precision(), log))
}

/// Tables for external plotting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub profiles: Vec<RankProfile>,
    /// Held-out perplexity per variant.
    pub ppl: BTreeMap<String, f64>,
    /// Projection parameters per variant.
    pub params: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub layer: usize,
    pub metric: String,
    pub variant: String,
    pub value: f64,
}

impl EvalReport {
    /// Per-layer rows: `rank` for every profile, and `rank_delta` against
    /// the profile labelled `dense` when one is present.
    pub fn rows(&self) -> Vec<CsvRow> {
        let dense = self.profiles.iter().find(|p| p.label == "dense");
        let mut rows = Vec::new();
        for p in &self.profiles {
            for (l, &r) in p.ranks.iter().enumerate() {
                rows.push(CsvRow { layer: l, metric: "rank".into(), variant: p.label.clone(), value: r as f64 });
                if let Some(base) = dense.and_then(|d| d.ranks.get(l)) {
                    rows.push(CsvRow {
                        layer: l,
                        metric: "rank_delta".into(),
                        variant: p.label.clone(),
                        value: r as f64 - *base as f64,
                    });
                }
            }
        }
        rows
    }

    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        // Header written by hand so an empty table still has one.
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["layer", "metric", "variant", "value"]).map_err(csv_err)?;
        for r in self.rows() {
            w.serialize(&r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `<stem>.json` and `<stem>.csv` next to each other.
pub fn emit_report(report: &EvalReport, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(report)?)?;
    report.write_csv(std::fs::File::create(stem.with_extension("csv"))?)
}
