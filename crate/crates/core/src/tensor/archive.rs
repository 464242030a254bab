//! The `ICST` named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ICST" | u32 version | u64 manifest_len | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The manifest maps each tensor name to `{shape, dtype: "f64", offset}`,
//! where `offset` is the byte offset of its data inside the payload. Names
//! are written in sorted order and payloads follow the same order, so a
//! load/save cycle reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ICST";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Entry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

fn fmt_err<T>(offset: u64, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset, msg: msg.into() })
}

pub fn encode(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut manifest = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        manifest.insert(
            name.clone(),
            Entry { shape: t.shape().to_vec(), dtype: "f64".into(), offset },
        );
        offset += 8 * t.numel() as u64;
    }
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < 16 {
        return fmt_err(bytes.len() as u64, "truncated ICST header");
    }
    if &bytes[0..4] != MAGIC {
        return fmt_err(0, "missing ICST magic");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return fmt_err(4, format!("unsupported ICST version {version}"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or(Error::Format { offset: 16, msg: format!("manifest of {mlen} bytes overruns file") })?;
    let manifest: BTreeMap<String, Entry> = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Format { offset: 16, msg: format!("bad manifest: {e}") })?;
    let payload = &bytes[payload_start..];
    let mut out = BTreeMap::new();
    for (name, e) in manifest {
        if e.dtype != "f64" {
            return fmt_err(16, format!("tensor {name}: unsupported dtype {}", e.dtype));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return fmt_err((payload_start + payload.len()) as u64, format!("tensor {name} payload truncated"));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::new(&e.shape, data)?);
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
