//! Minimal trainer: plain SGD with global-norm clipping on random windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{loss_and_gradients, GradOptions};
use super::checkpoint::Checkpoint;
use super::config::ModelConfig;
use super::forward::TokenBatch;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub seq_len: usize,
    pub clip_norm: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { batch_size: 8, seq_len: 32, clip_norm: 1.0 }
    }
}

/// Training loss before each step, plus the loss of the final weights on the
/// last batch drawn.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

fn draw_batch(rng: &mut ChaCha8Rng, corpus: &[u32], opts: &TrainOptions) -> Result<TokenBatch> {
    let span = opts.seq_len + 1;
    let starts = corpus.len() - span + 1;
    TokenBatch::new(
        (0..opts.batch_size)
            .map(|_| {
                let s = rng.random_range(0..starts);
                corpus[s..s + span].to_vec()
            })
            .collect(),
    )
}

/// Train from the seeded random init. Deterministic for a given seed.
pub fn train_toy(
    config: &ModelConfig,
    corpus: &[u32],
    steps: usize,
    lr: f64,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainLog)> {
    let mut ckpt = Checkpoint::random_init(config, seed)?;
    let mut log = TrainLog::default();
    if steps == 0 {
        return Ok((ckpt, log));
    }
    if opts.batch_size == 0 || opts.seq_len == 0 || !(lr > 0.0) {
        return Err(Error::Config("batch_size, seq_len and learning rate must be positive".into()));
    }
    if corpus.len() < opts.seq_len + 1 {
        return Err(Error::OutOfRange {
            what: "corpus",
            detail: format!("{} tokens, need at least {}", corpus.len(), opts.seq_len + 1),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a11);
    let mut batch = draw_batch(&mut rng, corpus, opts)?;
    for step in 0..steps {
        let (loss, grads) = loss_and_gradients(&ckpt, &batch, GradOptions::default())
            .map_err(|e| Error::NonFinite(format!("training diverged at step {step}: {e}")))?;
        log.losses.push(loss);
        if step % 100 == 0 {
            log::debug!("step {step}: loss {loss:.4}");
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {step}")));
        }
        let factor = if norm > opts.clip_norm { opts.clip_norm / norm } else { 1.0 };
        for (name, g) in &grads.tensors {
            let w = ckpt.tensors.get_mut(name).expect("gradient of a known tensor");
            w.add_assign(&g.scale(-lr * factor));
        }
        batch = draw_batch(&mut rng, corpus, opts)?;
    }
    let final_loss = super::forward::loss(&ckpt, &batch)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite("final training loss".into()));
    }
    log.losses.push(final_loss);
    Ok((ckpt.to_storage_precision(), log))
}
