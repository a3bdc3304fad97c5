//! Checkpoint container: `ISLICE01` magic, little-endian `u64` header length,
//! JSON header, then a contiguous little-endian `f32` payload.
//!
//! The header maps every tensor name to `{dtype, shape, offset, length}`
//! (offset and length in bytes, relative to the payload start). Two reserved
//! keys carry metadata: `config` (the [`ModelConfig`]) and `layout` (one
//! [`LayerLayout`] per layer).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::checkpoint::{Checkpoint, LayerLayout};
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"ISLICE01";
const RESERVED: [&str; 2] = ["config", "layout"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut header = Map::new();
    header.insert("config".into(), serde_json::to_value(&ckpt.config)?);
    header.insert("layout".into(), serde_json::to_value(&ckpt.layout)?);
    let mut payload = Vec::new();
    for (name, t) in &ckpt.tensors {
        if RESERVED.contains(&name.as_str()) {
            return Err(Error::Format(format!("tensor name {name} is reserved")));
        }
        let entry = TensorEntry {
            dtype: "f32".into(),
            shape: vec![t.rows(), t.cols()],
            offset: payload.len() as u64,
            length: (t.len() * 4) as u64,
        };
        for v in t.as_slice() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        header.insert(name.clone(), serde_json::to_value(entry)?);
    }
    let header = serde_json::to_vec(&Value::Object(header))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(Error::Format("file shorter than the fixed preamble".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected ISLICE01",
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Map<String, Value> = serde_json::from_slice(&body[..hlen])?;
    let payload = &body[hlen..];

    let config: ModelConfig = serde_json::from_value(
        header.get("config").cloned().ok_or_else(|| Error::Format("missing config".into()))?,
    )?;
    let layout: Vec<LayerLayout> = serde_json::from_value(
        header.get("layout").cloned().ok_or_else(|| Error::Format("missing layout".into()))?,
    )?;
    let mut tensors = BTreeMap::new();
    for (name, v) in &header {
        if RESERVED.contains(&name.as_str()) {
            continue;
        }
        let e: TensorEntry = serde_json::from_value(v.clone())?;
        if e.dtype != "f32" {
            return Err(Error::Format(format!("{name}: unsupported dtype {}", e.dtype)));
        }
        let [rows, cols] = e.shape[..] else {
            return Err(Error::Format(format!("{name}: expected a 2-d shape")));
        };
        let (start, len) = (e.offset as usize, e.length as usize);
        if len != rows * cols * 4 {
            return Err(Error::Format(format!("{name}: length {len} does not match shape")));
        }
        let end = start.checked_add(len).filter(|&end| end <= payload.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("{name}: truncated payload")));
        };
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.insert(name.clone(), DenseMatrix::from_vec(rows, cols, data)?);
    }
    let ckpt = Checkpoint { config, tensors, layout };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
