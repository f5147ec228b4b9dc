//! Single-file checkpoint: an 8-byte little-endian header length, a JSON
//! header, then the raw little-endian `f64` payload of every tensor in
//! manifest order. Manifest offsets are byte offsets from the payload start.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "relcon-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

pub fn to_bytes(meta: &serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = store
        .iter()
        .map(|(name, t)| {
            let entry = ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.len() as u64;
            entry
        })
        .collect();
    let header = Header {
        format: FORMAT.to_string(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore)> {
    let corrupt = |why: &str| Error::Data(format!("checkpoint: {why}"));
    if bytes.len() < 8 {
        return Err(corrupt("truncated header length"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[8..payload_start])?;
    if header.format != FORMAT {
        return Err(corrupt(&format!("unknown format {:?}", header.format)));
    }
    let payload = &bytes[payload_start..];
    let mut store = ParamStore::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(corrupt(&format!("tensor {} runs past end of file", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.push(entry.name, Tensor::new(entry.shape, data)?);
    }
    Ok((header.meta, store))
}

pub fn save(path: &Path, meta: &serde_json::Value, store: &ParamStore) -> Result<()> {
    fs::write(path, to_bytes(meta, store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
