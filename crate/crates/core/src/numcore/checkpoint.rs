//! Parameter checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "MPADCKP1"
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON
//! payload      f64 values, one parameter after another, row-major
//! ```
//!
//! The header is a JSON object with at least
//! `{"params": [{"name", "rows", "cols", "trainable"}...], "payload_sha256"}`
//! plus a free-form `"meta"` object (model config, labels, vocabulary
//! digest). Parameters appear in the payload in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MPADCKP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    params: Vec<ParamEntry>,
    payload_sha256: String,
    meta: serde_json::Value,
}

pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: serde_json::Value,
}

pub fn encode(params: &ParamStore, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for (_, p) in params.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            trainable: p.trainable,
        });
        for v in p.value.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        params: entries,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        meta,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
    let payload = &bytes[header_end..];
    let expected: usize = header.params.iter().map(|p| p.rows * p.cols * 8).sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload digest mismatch"));
    }
    let mut store = ParamStore::new();
    let mut chunks = payload.chunks_exact(8);
    for entry in header.params {
        let values: Vec<f64> = chunks
            .by_ref()
            .take(entry.rows * entry.cols)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Matrix::from_vec(entry.rows, entry.cols, values)?;
        store.add(entry.name, value, entry.trainable);
    }
    Ok(Checkpoint {
        params: store,
        meta: header.meta,
    })
}

pub fn save(path: &Path, params: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let bytes = encode(params, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
