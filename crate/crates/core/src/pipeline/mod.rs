//! End-to-end pruning.
//!
//! Mask gradients of the dense model set the per-layer ratios; then each
//! layer in turn has its attention compressed and fused, and its FFN
//! compressed and fused. With re-propagation on, every capture runs through
//! the already-pruned upstream layers.

mod calib;
mod online;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use calib::{
    bundled_tokens, byte_tokens, decode_tokens, encode_tokens, load_calibration, read_tokens, sample_windows,
    split_corpus, BUNDLED_CORPUS, CALIB_BATCH, TOKEN_MAGIC,
};
pub use online::{fuse_all, fuse_check, group_sharing_holds, online_logits, verify_fusion, LayerTransforms, TransformsLog};

use crate::error::{Error, Result};
use crate::ffnprune::{compress_ffn, fuse_ffn, ObjectiveRecord, Schedule};
use crate::globalratio::{
    allocate_ratios, block_sparse_pca, correct_importance, ffn_width_for, plan_to_targets_with, RatioPlan, UnitCosts,
};
use crate::headprune::{compress_mha, fuse_mha, mha_params, min_head_dim_ratio, MhaOptions};
use crate::linalg::Ridge;
use crate::tmodel::{
    capture_trace, container, loss_and_mask_gradients, ActivationTrace, CaptureOptions, Checkpoint, Hooks, LayerLayout,
    LayerTrace, MaskGradients, ModelConfig, TokenBatch,
};


#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IterateFfn {
    /// Iterate the layers in the top decile of FFN pruning ratios.
    #[default]
    Auto,
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    /// Token file; the bundled corpus (training split) when absent.
    pub path: Option<PathBuf>,
    pub num_samples: usize,
    pub seq_len: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { path: None, num_samples: 32, seq_len: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sparsity: f64,
    pub lambda_b: f64,
    pub calib: CalibConfig,
    pub seed: u64,
    pub repropagate: bool,
    pub iterate_ffn: IterateFfn,
    pub ridge: Ridge,
    /// Per-layer ratio cap.
    pub cap: f64,
    /// Head width floor as a fraction of the original.
    pub min_head_dim_ratio: f64,
    /// FFN block width of the sparse PCA used for importances.
    pub ffn_block: usize,
    /// Slice schedule for FFN iteration; `enabled` is set per layer.
    pub schedule: Schedule,
    pub fuse_trials: usize,
    pub fuse_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.3,
            lambda_b: 1.0,
            calib: CalibConfig::default(),
            seed: 0,
            repropagate: true,
            iterate_ffn: IterateFfn::Auto,
            ridge: Ridge::Auto,
            cap: 0.8,
            min_head_dim_ratio: 0.75,
            ffn_block: 32,
            schedule: Schedule::default(),
            fuse_trials: 4,
            fuse_tolerance: 1e-5,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return bad(format!("sparsity {} must lie in (0, 1)", self.sparsity));
        }
        if !(self.lambda_b >= 0.0 && self.lambda_b.is_finite()) {
            return bad(format!("lambda_b {} must be a nonnegative number", self.lambda_b));
        }
        if self.calib.num_samples == 0 || self.calib.seq_len < 2 {
            return bad("calibration needs num_samples ≥ 1 and seq_len ≥ 2".into());
        }
        if !(self.cap > 0.0 && self.cap <= 1.0) {
            return bad(format!("cap {} must lie in (0, 1]", self.cap));
        }
        if !(self.min_head_dim_ratio > 0.0 && self.min_head_dim_ratio <= 1.0) {
            return bad(format!("min_head_dim_ratio {} must lie in (0, 1]", self.min_head_dim_ratio));
        }
        if self.ffn_block == 0 || self.schedule.slice_width == 0 || self.fuse_trials == 0 {
            return bad("ffn_block, schedule.slice_width and fuse_trials must be positive".into());
        }
        if let Ridge::Value(v) = self.ridge {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("ridge value {v} must be nonnegative"));
            }
        }
        Ok(())
    }

    /// Calibration batches from the configured file, or from the training
    /// split of the bundled corpus.
    pub fn calibration(&self) -> Result<Vec<TokenBatch>> {
        let c = &self.calib;
        match &c.path {
            Some(p) => load_calibration(p, c.num_samples, c.seq_len, self.seed),
            None => sample_windows(split_corpus(&bundled_tokens()).0, c.num_samples, c.seq_len, self.seed),
        }
    }
}

/// What one layer should keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGoal {
    /// Attention width handed to the head search.
    pub mha_width: usize,
    /// Parameters the layer's seven projections should keep; the FFN width
    /// is chosen to land on it after the attention is settled.
    pub keep_params: f64,
    pub iterate_ffn: bool,
}

/// Settings shared by every layer of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerOptions {
    pub repropagate: bool,
    pub ridge: Ridge,
    pub min_head_dim: usize,
    pub schedule: Schedule,
}

impl LayerOptions {
    pub fn from_config(run: &RunConfig, model: &ModelConfig) -> Self {
        Self {
            repropagate: run.repropagate,
            ridge: run.ridge,
            min_head_dim: min_head_dim_ratio(model.head_dim, model.rope_enabled, run.min_head_dim_ratio),
            schedule: run.schedule,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub s_h: f64,
    pub s_f: f64,
    pub mha_target: usize,
    pub heads_kept: Vec<usize>,
    pub heads_removed: Vec<usize>,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub ffn_iterated: bool,
    pub ffn_objective: Vec<ObjectiveRecord>,
    pub mha_params: usize,
    pub ffn_params: usize,
}

/// Wall-clock data, kept apart because it is the only nondeterministic part
/// of a report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub layer_ms: Vec<f64>,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub requested_sparsity: f64,
    pub lambda_b: f64,
    pub ratio_plan: Option<RatioPlan>,
    pub layers: Vec<LayerReport>,
    /// Parameters in the projection matrices.
    pub prunable_before: usize,
    pub prunable_after: usize,
    pub total_before: usize,
    pub total_after: usize,
    pub realized_sparsity: f64,
    pub fuse_divergence: f64,
    pub ppl_before: Option<f64>,
    pub ppl_after: Option<f64>,
    pub timing: Timing,
}

impl PruneReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub struct PruneOutcome {
    /// Fused weights at storage precision.
    pub checkpoint: Checkpoint,
    pub report: PruneReport,
    pub transforms: TransformsLog,
}

impl PruneOutcome {
    /// `pruned.islc`, `report.json` and `transforms.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        container::save(&self.checkpoint, dir.join("pruned.islc"))?;
        std::fs::write(dir.join("report.json"), self.report.to_json()?)?;
        self.transforms.save(dir.join("transforms.json"))
    }
}

fn rows_in(calib: &[TokenBatch]) -> usize {
    calib.iter().map(TokenBatch::rows).sum()
}

fn capture(ckpt: &Checkpoint, calib: &[TokenBatch], layers: Option<Vec<usize>>) -> Result<ActivationTrace> {
    let opts = CaptureOptions { layers, row_cap: rows_in(calib).max(1) };
    capture_trace(ckpt, calib, &opts, Hooks::default())
}

fn layer_of(trace: &ActivationTrace, l: usize) -> Result<&LayerTrace> {
    trace.layer(l).ok_or_else(|| Error::Config(format!("trace lacks layer {l}")))
}

/// Mask gradients summed over the calibration batches.
pub fn mask_gradients(ckpt: &Checkpoint, calib: &[TokenBatch]) -> Result<MaskGradients> {
    let mut g = MaskGradients::zeros_like(ckpt);
    for b in calib {
        g.add_assign(&loss_and_mask_gradients(ckpt, b)?.1);
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("mask gradients".into()));
    }
    Ok(g)
}

fn require_dense(ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    if ckpt.layout.iter().any(|l| *l != LayerLayout::dense(&ckpt.config)) {
        return Err(Error::Config("pruning needs a dense checkpoint".into()));
    }
    Ok(())
}

/// Compress every layer toward its goal. Returns the fused f64 checkpoint,
/// the transforms and one report per layer.
pub fn prune_to_goals(
    ckpt: &Checkpoint,
    calib: &[TokenBatch],
    goals: &[LayerGoal],
    opts: &LayerOptions,
) -> Result<(Checkpoint, TransformsLog, Vec<LayerReport>, Vec<f64>)> {
    require_dense(ckpt)?;
    let cfg = ckpt.config.clone();
    if goals.len() != cfg.layers {
        return Err(Error::dims("prune_to_goals", format!("{} goals for {} layers", goals.len(), cfg.layers)));
    }
    if calib.is_empty() {
        return Err(Error::Config("empty calibration set".into()));
    }
    let dense_trace = if opts.repropagate { None } else { Some(capture(ckpt, calib, None)?) };
    let mha_opts = MhaOptions { ridge: opts.ridge, min_head_dim: Some(opts.min_head_dim) };
    let mut current = ckpt.clone();
    let mut log = TransformsLog::identity(&cfg);
    let mut reports = Vec::new();
    let mut times = Vec::new();
    let mut debt = 0.0;
    for (l, goal) in goals.iter().enumerate() {
        let start = Instant::now();
        let fresh;
        let trace = match &dense_trace {
            Some(t) => layer_of(t, l)?,
            None => {
                fresh = capture(&current, calib, Some(vec![l])).map_err(|e| e.at(l, "capture"))?;
                layer_of(&fresh, l)?
            }
        };
        let mha = compress_mha(&current, l, trace, goal.mha_width, &mha_opts).map_err(|e| e.at(l, "attention"))?;
        fuse_mha(&mut current, l, &mha.plan, &mha.transforms).map_err(|e| e.at(l, "attention fusion"))?;

        let mha_kept = mha_params(&cfg, &mha.plan);
        let ffn_p = ffn_width_for(&cfg, goal.keep_params - mha_kept as f64 - debt);
        debt += (mha_kept + crate::ffnprune::ffn_params(cfg.hidden, ffn_p)) as f64 - goal.keep_params;

        let refreshed;
        let ffn_trace = match &dense_trace {
            Some(t) => layer_of(t, l)?,
            None => {
                refreshed = capture(&current, calib, Some(vec![l])).map_err(|e| e.at(l, "capture"))?;
                layer_of(&refreshed, l)?
            }
        };
        let schedule = Schedule { enabled: goal.iterate_ffn, ..opts.schedule };
        let ffn = compress_ffn(&current, l, ffn_trace, ffn_p, &schedule, opts.ridge).map_err(|e| e.at(l, "ffn"))?;
        fuse_ffn(&mut current, l, &ffn.transforms).map_err(|e| e.at(l, "ffn fusion"))?;

        reports.push(LayerReport {
            layer: l,
            s_h: 0.0,
            s_f: 0.0,
            mha_target: goal.mha_width,
            heads_kept: mha.plan.kept.clone(),
            heads_removed: mha.plan.removed.clone(),
            head_dim: mha.plan.p,
            ffn_dim: ffn_p,
            ffn_iterated: ffn.iterated,
            ffn_objective: ffn.log,
            mha_params: mha_kept,
            ffn_params: crate::ffnprune::ffn_params(cfg.hidden, ffn_p),
        });
        log.layers[l] = LayerTransforms { plan: mha.plan, mha: mha.transforms, ffn: ffn.transforms };
        times.push(start.elapsed().as_secs_f64() * 1e3);
        log::info!("layer {l}: attention width {} ffn width {ffn_p}", current.layout[l].attn_width());
    }
    Ok((current, log, reports, times))
}

/// Layers that run the sliced FFN iteration under `mode`.
pub fn iteration_layers(mode: IterateFfn, plan: &RatioPlan) -> Vec<bool> {
    let n = plan.layers.len();
    match mode {
        IterateFfn::On => vec![true; n],
        IterateFfn::Off => vec![false; n],
        IterateFfn::Auto => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| plan.layers[b].s_f.total_cmp(&plan.layers[a].s_f).then(a.cmp(&b)));
            let mut on = vec![false; n];
            for &l in order.iter().take(n.div_ceil(10)) {
                on[l] = plan.layers[l].s_f > 0.0;
            }
            on
        }
    }
}

/// Per-layer goals for a ratio plan.
pub fn goals_for_plan(plan: &RatioPlan, cfg: &ModelConfig, min_dim: usize, mode: IterateFfn) -> Result<Vec<LayerGoal>> {
    let targets = plan_to_targets_with(plan, cfg, min_dim)?;
    let costs = UnitCosts::for_config(cfg);
    let width = (cfg.heads * cfg.head_dim) as f64;
    Ok(targets
        .iter()
        .zip(&plan.layers)
        .zip(iteration_layers(mode, plan))
        .map(|((t, lr), iterate_ffn)| LayerGoal {
            mha_width: t.mha,
            keep_params: (1.0 - lr.s_h) * width * costs.mha + (1.0 - lr.s_f) * cfg.inter as f64 * costs.ffn,
            iterate_ffn,
        })
        .collect())
}

/// Prune `ckpt` to `config.sparsity` and check the fusion before returning.
pub fn run_prune(config: &RunConfig, ckpt: &Checkpoint, calib: &[TokenBatch]) -> Result<PruneOutcome> {
    config.validate()?;
    require_dense(ckpt)?;
    let start = Instant::now();
    let cfg = &ckpt.config;
    let opts = LayerOptions::from_config(config, cfg);

    let grads = mask_gradients(ckpt, calib).map_err(|e| e.at(0, "mask gradients"))?;
    let bases = block_sparse_pca(&capture(ckpt, calib, None)?, cfg, config.ffn_block)?;
    let importance = correct_importance(&grads, &bases)?;
    let plan = allocate_ratios(&importance, UnitCosts::for_config(cfg), config.sparsity, config.lambda_b, config.cap)?;
    let goals = goals_for_plan(&plan, cfg, opts.min_head_dim, config.iterate_ffn)?;

    let (fused, transforms, mut layers, layer_ms) = prune_to_goals(ckpt, calib, &goals, &opts)?;
    let divergence =
        verify_fusion(ckpt, &fused, &transforms, config.fuse_trials, config.seed, config.fuse_tolerance)?;
    for (r, lr) in layers.iter_mut().zip(&plan.layers) {
        r.s_h = lr.s_h;
        r.s_f = lr.s_f;
    }
    let checkpoint = fused.to_storage_precision();
    let report = PruneReport {
        requested_sparsity: config.sparsity,
        lambda_b: config.lambda_b,
        ratio_plan: Some(plan),
        layers,
        prunable_before: ckpt.prunable_params(),
        prunable_after: checkpoint.prunable_params(),
        total_before: ckpt.total_params(),
        total_after: checkpoint.total_params(),
        realized_sparsity: 1.0 - checkpoint.prunable_params() as f64 / ckpt.prunable_params() as f64,
        fuse_divergence: divergence,
        ppl_before: None,
        ppl_after: None,
        timing: Timing { layer_ms, total_ms: start.elapsed().as_secs_f64() * 1e3 },
    };
    Ok(PruneOutcome { checkpoint, report, transforms })
}
