//! NTC v1: a flat container of named little-endian `f32` tensors.
//!
//! Layout: the bytes `NTC1`, a little-endian `u64` header length, a UTF-8
//! JSON header `[{"name", "shape", "offset"}]`, then the payload. Offsets
//! are byte positions relative to the start of the payload.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"NTC1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Serializes tensors in the given order.
pub fn encode_checkpoint<'a, I>(tensors: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
{
    let mut seen = HashSet::new();
    let mut header = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        if !seen.insert(name.to_string()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        header.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a container, preserving tensor order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!("truncated container ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("eight bytes"));
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(12))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {hlen} exceeds file")))?;
    let entries: Vec<Entry> =
        serde_json::from_slice(&bytes[12..hend]).map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &bytes[hend..];
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if !seen.insert(e.name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {:?}", e.name)));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape of {:?} overflows", e.name)))?;
        let start = usize::try_from(e.offset).map_err(|_| Error::Format("offset overflows".into()))?;
        let end = numel
            .checked_mul(4)
            .and_then(|n| start.checked_add(n))
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::Format(format!("tensor {:?} runs past the payload", e.name)))?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        out.push((e.name, Tensor::new(&e.shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint<'a, I>(path: impl AsRef<Path>, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
{
    let path = path.as_ref();
    let bytes = encode_checkpoint(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
