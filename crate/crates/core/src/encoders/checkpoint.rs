//! Versioned binary container of named float arrays.
//!
//! Layout: the ASCII line `goalign-ckpt/1\n`, a little-endian `u64` header
//! length, a JSON header `{format, meta, tensors: [{name, shape}]}`, then
//! every tensor's values as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "goalign-ckpt/1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Write to a temporary sibling and rename into place.
pub fn write_container(path: &Path, meta: serde_json::Value, arrays: &[NamedArray]) -> Result<()> {
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        meta,
        tensors: arrays
            .iter()
            .map(|a| TensorEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::malformed("checkpoint header", e))?;
    let total: usize = arrays.iter().map(|a| a.data.len()).sum();
    let mut buf = Vec::with_capacity(CHECKPOINT_FORMAT.len() + 9 + header.len() + total * 8);
    buf.extend_from_slice(CHECKPOINT_FORMAT.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for a in arrays {
        for v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<NamedArray>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::malformed(format!("checkpoint {}", path.display()), detail);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing format line"))?;
    let found = String::from_utf8_lossy(&bytes[..nl]).to_string();
    if found != CHECKPOINT_FORMAT {
        return Err(Error::Version {
            expected: CHECKPOINT_FORMAT.to_string(),
            found,
        });
    }
    let mut at = nl + 1;
    let len_bytes: [u8; 8] = bytes
        .get(at..at + 8)
        .ok_or_else(|| bad("truncated header length"))?
        .try_into()
        .expect("8 bytes");
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    at += 8;
    let header: Header = serde_json::from_slice(bytes.get(at..at + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|e| Error::malformed(format!("checkpoint {}", path.display()), e))?;
    at += hlen;
    let mut arrays = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = bytes
            .get(at..at + n * 8)
            .ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += n * 8;
        arrays.push(NamedArray {
            name: t.name,
            shape: t.shape,
            data,
        });
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header.meta, arrays))
}
