//! Binary checkpoint container.
//!
//! Layout: `b"CSTK"`, `u32` version, `u32` manifest length, the manifest as
//! UTF-8 JSON, then every tensor listed in the manifest as raw little-endian
//! `f32` values in manifest order. All integers are little-endian.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSTK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata owned by the writer (model config, step, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let manifest = Manifest {
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| bad("truncated header"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)
        .map_err(|_| bad("truncated header"))?;
    let len = u32::from_le_bytes(word) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("truncated payload for {}", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((manifest, out))
}
