//! Reverse-mode gradients of the mean next-token loss with respect to every
//! weight and to the virtual masks.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{layer_key, Checkpoint};
use super::forward::{self, silu, silu_grad, ForwardCache, Hooks, MaskSet, TokenBatch};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Gradients of the loss with respect to the all-ones masks of every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGradients {
    /// Per layer: one entry per attention-output channel.
    pub g_h: Vec<Vec<f64>>,
    /// Per layer: one entry per FFN intermediate channel.
    pub g_f: Vec<Vec<f64>>,
}

impl MaskGradients {
    pub fn zeros_like(ckpt: &Checkpoint) -> Self {
        let m = MaskSet::ones(ckpt);
        Self {
            g_h: m.heads.iter().map(|v| vec![0.0; v.len()]).collect(),
            g_f: m.ffn.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MaskGradients) {
        for (a, b) in self.g_h.iter_mut().zip(&other.g_h).chain(self.g_f.iter_mut().zip(&other.g_f)) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.g_h.iter_mut().chain(self.g_f.iter_mut()).flatten() {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.g_h.iter().chain(&self.g_f).flatten().all(|v| v.is_finite())
    }
}

/// Weight gradients keyed like the checkpoint tensors, plus mask gradients.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub tensors: BTreeMap<String, DenseMatrix>,
    pub masks: MaskGradients,
}

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.tensors.values().map(DenseMatrix::frobenius_norm_sq).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradOptions<'a> {
    /// Multiplies the loss before differentiation.
    pub loss_scale: f64,
    pub masks: Option<&'a MaskSet>,
}

impl Default for GradOptions<'_> {
    fn default() -> Self {
        Self { loss_scale: 1.0, masks: None }
    }
}

/// Mean next-token cross-entropy and its gradients.
pub fn loss_and_gradients(ckpt: &Checkpoint, batch: &TokenBatch, opts: GradOptions<'_>) -> Result<(f64, Gradients)> {
    let ones;
    let masks = match opts.masks {
        Some(m) => m,
        None => {
            ones = MaskSet::ones(ckpt);
            &ones
        }
    };
    let hooks = Hooks { masks: Some(masks), ..Hooks::default() };
    let out = forward::run(ckpt, batch, hooks, None, true)?;
    let (loss, count) = forward::next_token_loss(&out.logits, batch);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let cache = out.cache.expect("cache requested");
    let dlogits = loss_grad(&out.logits, batch, opts.loss_scale / count as f64);
    let grads = backward(ckpt, masks, &cache, dlogits)?;
    Ok((loss * opts.loss_scale, grads))
}

/// Loss and mask gradients at mask = 1, summed over every token of the batch.
pub fn loss_and_mask_gradients(ckpt: &Checkpoint, batch: &TokenBatch) -> Result<(f64, MaskGradients)> {
    let (l, g) = loss_and_gradients(ckpt, batch, GradOptions::default())?;
    Ok((l, g.masks))
}

fn loss_grad(logits: &DenseMatrix, batch: &TokenBatch, scale: f64) -> DenseMatrix {
    let seq = batch.seq_len();
    let mut d = DenseMatrix::zeros(logits.rows(), logits.cols());
    for (b, s) in batch.seqs().iter().enumerate() {
        for t in 0..seq.saturating_sub(1) {
            let r = b * seq + t;
            let row = logits.row(r);
            let lse = forward::log_sum_exp(row);
            let drow = d.row_mut(r);
            for (o, v) in drow.iter_mut().zip(row) {
                *o = (v - lse).exp() * scale;
            }
            drow[s[t + 1] as usize] -= scale;
        }
    }
    d
}

/// Backward through `y = rms(x) * w`; returns `dx` and `dw`.
fn rms_norm_backward(x: &DenseMatrix, inv: &[f64], w: &DenseMatrix, dy: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let d = x.cols();
    let mut dx = DenseMatrix::zeros(x.rows(), d);
    let mut dw = DenseMatrix::zeros(1, d);
    for r in 0..x.rows() {
        let (xr, dyr, ir) = (x.row(r), dy.row(r), inv[r]);
        let mut dot = 0.0;
        for j in 0..d {
            dw.as_mut_slice()[j] += dyr[j] * xr[j] * ir;
            dot += dyr[j] * w.as_slice()[j] * xr[j];
        }
        let coef = ir * ir * ir * dot / d as f64;
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = ir * w.as_slice()[j] * dyr[j] - coef * xr[j];
        }
    }
    (dx, dw)
}

fn column_dot(a: &DenseMatrix, b: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; a.cols()];
    for r in 0..a.rows() {
        for ((o, x), y) in out.iter_mut().zip(a.row(r)).zip(b.row(r)) {
            *o += x * y;
        }
    }
    out
}

fn backward(ckpt: &Checkpoint, masks: &MaskSet, cache: &ForwardCache, dlogits: DenseMatrix) -> Result<Gradients> {
    let cfg = &ckpt.config;
    let mut grads = BTreeMap::new();
    let mut mgrad = MaskGradients::zeros_like(ckpt);

    let head = ckpt.tensor("lm_head")?;
    grads.insert("lm_head".to_string(), cache.h_final.t_mul(&dlogits));
    let dhf = dlogits.mul_t(head);
    let (mut dx, dwf) = rms_norm_backward(&cache.x_final, &cache.inv_final, ckpt.tensor("final_norm")?, &dhf);
    grads.insert("final_norm".to_string(), dwf);

    for l in (0..cfg.layers).rev() {
        let c = &cache.layers[l];
        let w = |n: &str| ckpt.layer_tensor(l, n);

        // FFN: x_out = x_mid + (a ∘ m_f) W_d
        let a_m = forward::scale_columns(&c.a, &masks.ffn[l]);
        grads.insert(layer_key(l, "wd"), a_m.t_mul(&dx));
        let da_m = dx.mul_t(w("wd")?);
        mgrad.g_f[l] = column_dot(&da_m, &c.a);
        let da = forward::scale_columns(&da_m, &masks.ffn[l]);
        let mut du = DenseMatrix::zeros(c.u.rows(), c.u.cols());
        let mut dg = DenseMatrix::zeros(c.g.rows(), c.g.cols());
        for (((o_u, o_g), (&dav, &uv)), &gv) in du
            .as_mut_slice()
            .iter_mut()
            .zip(dg.as_mut_slice().iter_mut())
            .zip(da.as_slice().iter().zip(c.u.as_slice()))
            .zip(c.g.as_slice())
        {
            *o_u = dav * silu(gv);
            *o_g = dav * uv * silu_grad(gv);
        }
        grads.insert(layer_key(l, "wu"), c.h2.t_mul(&du));
        grads.insert(layer_key(l, "wg"), c.h2.t_mul(&dg));
        let dh2 = du.mul_t(w("wu")?).add(&dg.mul_t(w("wg")?))?;
        let (dxm_norm, dw2) = rms_norm_backward(&c.x_mid, &c.inv2, w("ffn_norm")?, &dh2);
        grads.insert(layer_key(l, "ffn_norm"), dw2);
        let dx_mid = dx.add(&dxm_norm)?;

        // Attention: x_mid = x_in + (xo ∘ m_h) W_o
        let xo_m = forward::scale_columns(&c.xo, &masks.heads[l]);
        grads.insert(layer_key(l, "wo"), xo_m.t_mul(&dx_mid));
        let dxo_m = dx_mid.mul_t(w("wo")?);
        mgrad.g_h[l] = column_dot(&dxo_m, &c.xo);
        let dxo = forward::scale_columns(&dxo_m, &masks.heads[l]);

        let (dq_rot, dk_rot, dv) = attention_backward(c, &dxo, cache.positions.len());
        let dq = c.spec.rotate_q(&dq_rot, &cache.positions, true)?;
        let dk = c.spec.rotate_k(&dk_rot, &cache.positions, true)?;
        grads.insert(layer_key(l, "wq"), c.h.t_mul(&dq));
        grads.insert(layer_key(l, "wk"), c.h.t_mul(&dk));
        grads.insert(layer_key(l, "wv"), c.h.t_mul(&dv));
        let dh = dq.mul_t(w("wq")?).add(&dk.mul_t(w("wk")?))?.add(&dv.mul_t(w("wv")?))?;
        let (dx_norm, dw1) = rms_norm_backward(&c.x_in, &c.inv1, w("attn_norm")?, &dh);
        grads.insert(layer_key(l, "attn_norm"), dw1);
        dx = dx_mid.add(&dx_norm)?;
    }

    let emb = ckpt.tensor("embed")?;
    let mut demb = DenseMatrix::zeros(emb.rows(), emb.cols());
    for (r, &tok) in cache.tokens.iter().enumerate() {
        let src = dx.row(r).to_vec();
        for (o, v) in demb.row_mut(tok as usize).iter_mut().zip(src) {
            *o += v;
        }
    }
    grads.insert("embed".to_string(), demb);
    Ok(Gradients { tensors: grads, masks: mgrad })
}

/// Gradients of rotated q, rotated k and v from the gradient of the
/// concatenated head outputs.
fn attention_backward(c: &forward::LayerCache, dxo: &DenseMatrix, rows: usize) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    let spec = &c.spec;
    let p = spec.width;
    let nh = spec.heads();
    let seq = c.probs.first().map_or(rows, DenseMatrix::rows);
    let nb = rows / seq;
    let jobs: Vec<(usize, usize)> = (0..nb).flat_map(|b| (0..nh).map(move |i| (b, i))).collect();
    let parts: Vec<(DenseMatrix, DenseMatrix, DenseMatrix)> = jobs
        .par_iter()
        .map(|&(b, i)| {
            let slot = spec.kv_slot[i];
            let r0 = b * seq;
            let probs = &c.probs[b * nh + i];
            let d_out = dxo.submatrix(r0, i * p, seq, p);
            let qh = c.q_rot.submatrix(r0, i * p, seq, p);
            let kh = c.k_rot.submatrix(r0, slot * p, seq, p);
            let vh = c.v.submatrix(r0, slot * p, seq, p);
            let dprobs = d_out.mul_t(&vh);
            let dvh = probs.t_mul(&d_out);
            let mut ds = DenseMatrix::zeros(seq, seq);
            for t in 0..seq {
                let (pr, dpr) = (probs.row(t), dprobs.row(t));
                let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                let out = ds.row_mut(t);
                for s in 0..=t {
                    out[s] = pr[s] * (dpr[s] - dot) * spec.scale;
                }
            }
            (ds.mul(&kh), ds.t_mul(&qh), dvh)
        })
        .collect();
    let mut dq = DenseMatrix::zeros(rows, nh * p);
    let kw = c.k_rot.cols();
    let mut dk = DenseMatrix::zeros(rows, kw);
    let mut dv = DenseMatrix::zeros(rows, kw);
    for (&(b, i), (dqh, dkh, dvh)) in jobs.iter().zip(parts) {
        let slot = spec.kv_slot[i];
        let r0 = b * seq;
        dq.set_submatrix(r0, i * p, &dqh);
        for t in 0..seq {
            for j in 0..p {
                dk[(r0 + t, slot * p + j)] += dkh[(t, j)];
                dv[(r0 + t, slot * p + j)] += dvh[(t, j)];
            }
        }
    }
    (dq, dk, dv)
}
