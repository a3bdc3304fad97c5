use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tmodel::TokenBatch;

/// Magic of the binary token file: `ISLTOK01`, a little-endian `u64`
/// count, then that many little-endian `u32` token ids.
pub const TOKEN_MAGIC: &[u8; 8] = b"ISLTOK01";

/// The license texts bundled as the toy corpus.
pub const BUNDLED_CORPUS: &str = include_str!("../../data/tiny_corpus.txt");

/// Sequences per calibration batch.
pub const CALIB_BATCH: usize = 8;

pub fn byte_tokens(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

pub fn bundled_tokens() -> Vec<u32> {
    byte_tokens(BUNDLED_CORPUS.as_bytes())
}

/// First 90% for training and calibration, the rest held out.
pub fn split_corpus(tokens: &[u32]) -> (&[u32], &[u32]) {
    tokens.split_at(tokens.len() * 9 / 10)
}

pub fn encode_tokens(tokens: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * tokens.len());
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// Token file contents: the binary format when the magic matches, otherwise
/// UTF-8 text at byte level.
pub fn decode_tokens(bytes: &[u8]) -> Result<Vec<u32>> {
    let Some(body) = bytes.strip_prefix(TOKEN_MAGIC.as_slice()) else {
        if std::str::from_utf8(bytes).is_err() {
            return Err(Error::Format("token file is neither ISLTOK01 nor UTF-8 text".into()));
        }
        return Ok(byte_tokens(bytes));
    };
    let n = body
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| Error::Format("token header truncated".into()))?;
    let payload = &body[8..];
    if payload.len() != n.checked_mul(4).ok_or_else(|| Error::Format("token count overflows".into()))? {
        return Err(Error::Format(format!("token payload holds {} bytes, header says {n} tokens", payload.len())));
    }
    Ok(payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn read_tokens(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    decode_tokens(&std::fs::read(path)?)
}

/// Draw `num_samples` distinct non-overlapping windows of `seq_len` tokens,
/// deterministically in `seed`, grouped into batches of [`CALIB_BATCH`].
pub fn sample_windows(tokens: &[u32], num_samples: usize, seq_len: usize, seed: u64) -> Result<Vec<TokenBatch>> {
    if num_samples == 0 || seq_len < 2 {
        return Err(Error::Config(format!("calibration needs num_samples ≥ 1 and seq_len ≥ 2 (got {num_samples}, {seq_len})")));
    }
    let windows = tokens.len() / seq_len;
    if windows == 0 {
        return Err(Error::OutOfRange {
            what: "calibration corpus",
            detail: format!("{} tokens, shorter than one window of {seq_len}", tokens.len()),
        });
    }
    if windows < num_samples {
        log::warn!("calibration corpus holds only {windows} window(s) of {seq_len} tokens; {num_samples} requested");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, windows, num_samples.min(windows)).into_vec();
    picks.sort_unstable();
    picks
        .chunks(CALIB_BATCH)
        .map(|c| TokenBatch::new(c.iter().map(|&w| tokens[w * seq_len..(w + 1) * seq_len].to_vec()).collect()))
        .collect()
}

/// [`sample_windows`] over a token file.
pub fn load_calibration(path: impl AsRef<Path>, num_samples: usize, seq_len: usize, seed: u64) -> Result<Vec<TokenBatch>> {
    sample_windows(&read_tokens(path)?, num_samples, seq_len, seed)
}
