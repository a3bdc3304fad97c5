use rayon::prelude::*;

use super::checkpoint::{Checkpoint, LayerLayout};
use super::config::{ModelConfig, NORM_EPS};
use super::rope;
use super::trace::{ActivationTrace, Capture, CaptureOptions, LayerTrace};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Equal-length token sequences; rows of every activation matrix are laid
/// out sequence-major (`row = b * seq_len + t`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    seqs: Vec<Vec<u32>>,
}

impl TokenBatch {
    pub fn new(seqs: Vec<Vec<u32>>) -> Result<Self> {
        let len = seqs.first().map(Vec::len).unwrap_or(0);
        if seqs.is_empty() || len == 0 {
            return Err(Error::OutOfRange { what: "batch", detail: "empty batch".into() });
        }
        if seqs.iter().any(|s| s.len() != len) {
            return Err(Error::dims("TokenBatch", "sequences differ in length"));
        }
        Ok(Self { seqs })
    }

    pub fn seqs(&self) -> &[Vec<u32>] {
        &self.seqs
    }

    pub fn batch_size(&self) -> usize {
        self.seqs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seqs[0].len()
    }

    pub fn rows(&self) -> usize {
        self.batch_size() * self.seq_len()
    }

    fn check_vocab(&self, vocab: usize) -> Result<()> {
        if let Some(&bad) = self.seqs.iter().flatten().find(|&&t| t as usize >= vocab) {
            return Err(Error::OutOfRange { what: "token id", detail: format!("{bad} >= vocab {vocab}") });
        }
        Ok(())
    }
}

/// Virtual multiplicative masks on the attention output (before `W_o`) and
/// the gated intermediate (before `W_d`).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub heads: Vec<Vec<f64>>,
    pub ffn: Vec<Vec<f64>>,
}

impl MaskSet {
    pub fn ones(ckpt: &Checkpoint) -> Self {
        Self {
            heads: ckpt.layout.iter().map(|l| vec![1.0; l.attn_width()]).collect(),
            ffn: ckpt.layout.iter().map(|l| vec![1.0; l.ffn_dim]).collect(),
        }
    }
}

/// Optional interventions on the forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Hooks<'a> {
    pub masks: Option<&'a MaskSet>,
    /// Per layer, a `D × D` map applied to the residual stream after the block.
    pub residual_maps: Option<&'a [Option<DenseMatrix>]>,
    pub position_offset: usize,
}

pub(crate) fn positions(batch: &TokenBatch, offset: usize) -> Vec<usize> {
    let t = batch.seq_len();
    (0..batch.rows()).map(|r| r % t + offset).collect()
}

/// RMSNorm of every row, scaled by `w`; returns the output and `1/rms` per row.
pub(crate) fn rms_norm(x: &DenseMatrix, w: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let d = x.cols();
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let ir = 1.0 / (ms + NORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(w.as_slice()) {
            *v *= ir * g;
        }
        inv.push(ir);
    }
    (out, inv)
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Column/frequency geometry of one attention layer.
#[derive(Clone, Debug)]
pub(crate) struct AttnSpec {
    pub width: usize,
    pub scale: f64,
    /// Per retained head: its KV slot.
    pub kv_slot: Vec<usize>,
    pub q_freqs: Vec<Option<Vec<f64>>>,
    pub kv_freqs: Vec<Option<Vec<f64>>>,
}

impl AttnSpec {
    pub fn from_layout(config: &ModelConfig, layout: &LayerLayout) -> Self {
        let kv_slot: Vec<usize> = layout.retained_heads.iter().map(|&h| layout.kv_slot(config, h)).collect();
        let groups = layout.retained_groups(config).len();
        let q_freqs: Vec<Option<Vec<f64>>> = match &layout.rope_pair_mask {
            Some(masks) => masks
                .iter()
                .map(|m| Some(rope::pair_frequencies(config.head_dim, config.rope_theta, m)))
                .collect(),
            None => vec![None; layout.retained_heads.len()],
        };
        let mut kv_freqs = vec![None; groups];
        for (i, &s) in kv_slot.iter().enumerate() {
            if kv_freqs[s].is_none() {
                kv_freqs[s] = q_freqs[i].clone();
            }
        }
        Self { width: layout.per_head_dim, scale: config.attn_scale(), kv_slot, q_freqs, kv_freqs }
    }

    pub fn heads(&self) -> usize {
        self.kv_slot.len()
    }

    fn rotate_cols(
        &self,
        x: &DenseMatrix,
        freqs: &[Option<Vec<f64>>],
        pos: &[usize],
        inverse: bool,
    ) -> Result<DenseMatrix> {
        let p = self.width;
        let mut out = x.clone();
        for (i, f) in freqs.iter().enumerate() {
            if let Some(f) = f {
                let block = x.column_block(i * p, p);
                let r = if inverse { rope::rotate_inverse(&block, pos, f)? } else { rope::rotate(&block, pos, f)? };
                out.set_submatrix(0, i * p, &r);
            }
        }
        Ok(out)
    }

    pub fn rotate_q(&self, q: &DenseMatrix, pos: &[usize], inverse: bool) -> Result<DenseMatrix> {
        self.rotate_cols(q, &self.q_freqs, pos, inverse)
    }

    pub fn rotate_k(&self, k: &DenseMatrix, pos: &[usize], inverse: bool) -> Result<DenseMatrix> {
        self.rotate_cols(k, &self.kv_freqs, pos, inverse)
    }
}

/// Causal softmax attention over rotated `q`/`k`. Returns the concatenated
/// head outputs and, when asked, the probability matrix of every
/// `(sequence, head)` pair in `b * heads + i` order.
pub(crate) fn attention(
    spec: &AttnSpec,
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    batch: usize,
    seq: usize,
    keep_probs: bool,
) -> (DenseMatrix, Vec<DenseMatrix>) {
    let p = spec.width;
    let nh = spec.heads();
    let jobs: Vec<(usize, usize)> = (0..batch).flat_map(|b| (0..nh).map(move |i| (b, i))).collect();
    let results: Vec<(DenseMatrix, DenseMatrix)> = jobs
        .par_iter()
        .map(|&(b, i)| {
            let slot = spec.kv_slot[i];
            let r0 = b * seq;
            let qh = q.submatrix(r0, i * p, seq, p);
            let kh = k.submatrix(r0, slot * p, seq, p);
            let vh = v.submatrix(r0, slot * p, seq, p);
            let mut probs = qh.mul_t(&kh);
            for t in 0..seq {
                let row = probs.row_mut(t);
                let mut mx = f64::NEG_INFINITY;
                for s in 0..=t {
                    row[s] *= spec.scale;
                    mx = mx.max(row[s]);
                }
                let mut z = 0.0;
                for s in 0..=t {
                    row[s] = (row[s] - mx).exp();
                    z += row[s];
                }
                for s in 0..seq {
                    row[s] = if s <= t { row[s] / z } else { 0.0 };
                }
            }
            let out = probs.mul(&vh);
            (probs, out)
        })
        .collect();
    let mut xo = DenseMatrix::zeros(batch * seq, nh * p);
    let mut all_probs = Vec::new();
    for (&(b, i), (probs, out)) in jobs.iter().zip(results) {
        xo.set_submatrix(b * seq, i * p, &out);
        if keep_probs {
            all_probs.push(probs);
        }
    }
    (xo, all_probs)
}

/// Intermediates of one layer kept for the backward pass.
pub(crate) struct LayerCache {
    pub x_in: DenseMatrix,
    pub h: DenseMatrix,
    pub inv1: Vec<f64>,
    pub q_rot: DenseMatrix,
    pub k_rot: DenseMatrix,
    pub v: DenseMatrix,
    pub probs: Vec<DenseMatrix>,
    pub xo: DenseMatrix,
    pub x_mid: DenseMatrix,
    pub h2: DenseMatrix,
    pub inv2: Vec<f64>,
    pub u: DenseMatrix,
    pub g: DenseMatrix,
    pub a: DenseMatrix,
    pub spec: AttnSpec,
}

pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub x_final: DenseMatrix,
    pub h_final: DenseMatrix,
    pub inv_final: Vec<f64>,
    pub positions: Vec<usize>,
    pub tokens: Vec<u32>,
}

pub(crate) struct ForwardOutput {
    pub logits: DenseMatrix,
    pub cache: Option<ForwardCache>,
}

fn new_layer_trace(ckpt: &Checkpoint, l: usize, cap: usize) -> LayerTrace {
    let c = &ckpt.config;
    let lay = &ckpt.layout[l];
    let d = c.hidden;
    LayerTrace {
        mha_input: Capture::new(d, cap),
        q_out: Capture::new(lay.attn_width(), cap),
        k_out: Capture::new(lay.kv_width(c), cap),
        o_proj_input: Capture::new(lay.attn_width(), cap),
        ffn_input: Capture::new(d, cap),
        up_out: Capture::new(lay.ffn_dim, cap),
        gate_out: Capture::new(lay.ffn_dim, cap),
        down_input: Capture::new(lay.ffn_dim, cap),
        block_output: Capture::new(d, cap),
    }
}

/// Empty trace shaped for `ckpt`.
pub fn empty_trace(ckpt: &Checkpoint, opts: &CaptureOptions) -> ActivationTrace {
    ActivationTrace {
        layers: (0..ckpt.config.layers)
            .map(|l| opts.wants(l).then(|| new_layer_trace(ckpt, l, opts.row_cap)))
            .collect(),
    }
}

pub(crate) fn embed(ckpt: &Checkpoint, batch: &TokenBatch) -> Result<DenseMatrix> {
    let emb = ckpt.tensor("embed")?;
    let d = ckpt.config.hidden;
    let mut x = DenseMatrix::zeros(batch.rows(), d);
    for (r, &tok) in batch.seqs().iter().flatten().enumerate() {
        x.row_mut(r).copy_from_slice(emb.row(tok as usize));
    }
    Ok(x)
}

pub(crate) fn run(
    ckpt: &Checkpoint,
    batch: &TokenBatch,
    hooks: Hooks<'_>,
    mut trace: Option<&mut ActivationTrace>,
    keep_cache: bool,
) -> Result<ForwardOutput> {
    let cfg = &ckpt.config;
    batch.check_vocab(cfg.vocab)?;
    let (nb, seq) = (batch.batch_size(), batch.seq_len());
    if keep_cache && hooks.residual_maps.is_some() {
        return Err(Error::Config("gradients through residual maps are not supported".into()));
    }
    let pos = positions(batch, hooks.position_offset);
    let mut x = embed(ckpt, batch)?;
    let mut caches = Vec::new();

    for l in 0..cfg.layers {
        let lay = &ckpt.layout[l];
        let spec = AttnSpec::from_layout(cfg, lay);
        let w = |n: &str| ckpt.layer_tensor(l, n);

        let (h, inv1) = rms_norm(&x, w("attn_norm")?);
        let q = h.mul(w("wq")?);
        let k = h.mul(w("wk")?);
        let v = h.mul(w("wv")?);
        let q_rot = spec.rotate_q(&q, &pos, false)?;
        let k_rot = spec.rotate_k(&k, &pos, false)?;
        let (xo, probs) = attention(&spec, &q_rot, &k_rot, &v, nb, seq, keep_cache);
        let xo_m = match hooks.masks {
            Some(m) => scale_columns(&xo, &m.heads[l]),
            None => xo.clone(),
        };
        let x_mid = x.add(&xo_m.mul(w("wo")?))?;

        let (h2, inv2) = rms_norm(&x_mid, w("ffn_norm")?);
        let u = h2.mul(w("wu")?);
        let g = h2.mul(w("wg")?);
        let a = u.hadamard(&g.map(silu))?;
        let a_m = match hooks.masks {
            Some(m) => scale_columns(&a, &m.ffn[l]),
            None => a.clone(),
        };
        let mut x_out = x_mid.add(&a_m.mul(w("wd")?))?;
        if let Some(Some(map)) = hooks.residual_maps.and_then(|maps| maps.get(l)) {
            x_out = x_out.mul(map);
        }

        if let Some(t) = trace.as_deref_mut().and_then(|t| t.layers.get_mut(l)).and_then(Option::as_mut) {
            t.mha_input.absorb(&h)?;
            t.q_out.absorb(&q)?;
            t.k_out.absorb(&k)?;
            t.o_proj_input.absorb(&xo)?;
            t.ffn_input.absorb(&h2)?;
            t.up_out.absorb(&u)?;
            t.gate_out.absorb(&g)?;
            t.down_input.absorb(&a)?;
            t.block_output.absorb(&x_out)?;
        }
        if keep_cache {
            caches.push(LayerCache {
                x_in: x,
                h,
                inv1,
                q_rot,
                k_rot,
                v,
                probs,
                xo,
                x_mid,
                h2,
                inv2,
                u,
                g,
                a,
                spec,
            });
        }
        x = x_out;
    }
    let (hf, invf) = rms_norm(&x, ckpt.tensor("final_norm")?);
    let logits = hf.mul(ckpt.tensor("lm_head")?);
    let cache = keep_cache.then(|| ForwardCache {
        layers: caches,
        x_final: x,
        h_final: hf,
        inv_final: invf,
        positions: pos,
        tokens: batch.seqs().iter().flatten().copied().collect(),
    });
    Ok(ForwardOutput { logits, cache })
}

pub(crate) fn scale_columns(x: &DenseMatrix, s: &[f64]) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, m) in out.row_mut(r).iter_mut().zip(s) {
            *v *= m;
        }
    }
    out
}

/// Logits (`rows × vocab`) for a batch and, when `capture` is set, the
/// activation trace of every layer.
pub fn forward_capture(
    ckpt: &Checkpoint,
    batch: &TokenBatch,
    capture: bool,
) -> Result<(DenseMatrix, Option<ActivationTrace>)> {
    let mut trace = capture.then(|| empty_trace(ckpt, &CaptureOptions::default()));
    let out = run(ckpt, batch, Hooks::default(), trace.as_mut(), false)?;
    Ok((out.logits, trace))
}

/// Logits with optional hooks and no capture.
pub fn forward_with(ckpt: &Checkpoint, batch: &TokenBatch, hooks: Hooks<'_>) -> Result<DenseMatrix> {
    Ok(run(ckpt, batch, hooks, None, false)?.logits)
}

pub fn logits(ckpt: &Checkpoint, batch: &TokenBatch) -> Result<DenseMatrix> {
    forward_with(ckpt, batch, Hooks::default())
}

/// Accumulate a trace over several batches.
pub fn capture_trace(
    ckpt: &Checkpoint,
    batches: &[TokenBatch],
    opts: &CaptureOptions,
    hooks: Hooks<'_>,
) -> Result<ActivationTrace> {
    let mut trace = empty_trace(ckpt, opts);
    for b in batches {
        run(ckpt, b, hooks, Some(&mut trace), false)?;
    }
    Ok(trace)
}

/// Mean next-token cross-entropy of `logits` against `batch`, and the count
/// of predicted positions.
pub(crate) fn next_token_loss(logits: &DenseMatrix, batch: &TokenBatch) -> (f64, usize) {
    let seq = batch.seq_len();
    let mut total = 0.0;
    let mut n = 0;
    for (b, s) in batch.seqs().iter().enumerate() {
        for t in 0..seq.saturating_sub(1) {
            let row = logits.row(b * seq + t);
            total += log_sum_exp(row) - row[s[t + 1] as usize];
            n += 1;
        }
    }
    (total / n.max(1) as f64, n)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Mean next-token cross-entropy over the batch.
pub fn loss(ckpt: &Checkpoint, batch: &TokenBatch) -> Result<f64> {
    let l = logits(ckpt, batch)?;
    Ok(next_token_loss(&l, batch).0)
}

/// `exp` of the mean next-token cross-entropy over non-overlapping windows
/// of `seq_len` predictions each.
pub fn perplexity(ckpt: &Checkpoint, corpus: &[u32], seq_len: usize) -> Result<f64> {
    if seq_len == 0 || corpus.len() < seq_len + 1 {
        return Err(Error::OutOfRange {
            what: "corpus",
            detail: format!("{} tokens, need at least {}", corpus.len(), seq_len + 1),
        });
    }
    let windows = (corpus.len() - 1) / seq_len;
    let seqs: Vec<Vec<u32>> =
        (0..windows).map(|w| corpus[w * seq_len..w * seq_len + seq_len + 1].to_vec()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(16) {
        let batch = TokenBatch::new(chunk.to_vec())?;
        let (mean, n) = next_token_loss(&logits(ckpt, &batch)?, &batch);
        total += mean * n as f64;
        count += n;
    }
    let ppl = (total / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite("perplexity".into()));
    }
    Ok(ppl)
}
