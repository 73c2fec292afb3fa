//! Little-endian binary container shared by datasets and checkpoints.
//!
//! ```text
//! "MVPL" | version: u32 | manifest length: u64 | manifest JSON | payload
//! ```
//!
//! The manifest lists every blob by name with its offset (bytes, relative to
//! the payload start) and length (number of f64 values).

use std::collections::HashMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ContainerError, Result};

pub const MAGIC: [u8; 4] = *b"MVPL";
pub const VERSION: u32 = 1;
const PREFIX: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub name: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    kind: String,
    blobs: Vec<BlobRef>,
    meta: M,
}

/// Serializes `meta` and the named blobs into one byte buffer.
pub fn encode<M: Serialize>(kind: &str, meta: &M, blobs: &[(String, &[f64])]) -> Result<Vec<u8>> {
    let mut refs = Vec::with_capacity(blobs.len());
    let mut offset = 0u64;
    for (name, data) in blobs {
        refs.push(BlobRef {
            name: name.clone(),
            offset,
            len: data.len() as u64,
        });
        offset += 8 * data.len() as u64;
    }
    let header = Header {
        kind: kind.to_string(),
        blobs: refs,
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ContainerError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, data) in blobs {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// A decoded container borrowing its payload.
#[derive(Debug)]
pub struct Container<'a> {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blobs: Vec<BlobRef>,
    index: HashMap<String, usize>,
    payload: &'a [u8],
    payload_start: u64,
}

fn truncated(offset: u64, needed: u64, available: u64) -> ContainerError {
    ContainerError::Truncated {
        offset,
        needed,
        available,
    }
}

/// Parses the header and checks that every blob lies inside the payload.
pub fn decode(bytes: &[u8]) -> Result<Container<'_>, ContainerError> {
    let total = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(truncated(0, 4, total));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    if bytes.len() < PREFIX {
        return Err(truncated(4, PREFIX as u64 - 4, total - 4));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let available = total - PREFIX as u64;
    if json_len > available {
        return Err(truncated(PREFIX as u64, json_len, available));
    }
    let json_end = PREFIX + json_len as usize;
    let header: Header<serde_json::Value> =
        serde_json::from_slice(&bytes[PREFIX..json_end]).map_err(|e| ContainerError::Manifest(e.to_string()))?;
    let payload = &bytes[json_end..];
    let mut index = HashMap::with_capacity(header.blobs.len());
    for (i, b) in header.blobs.iter().enumerate() {
        let needed = b
            .len
            .checked_mul(8)
            .ok_or_else(|| ContainerError::Manifest(format!("blob `{}` length overflows", b.name)))?;
        let end = b.offset.checked_add(needed);
        if end.is_none_or(|e| e > payload.len() as u64) {
            return Err(truncated(json_end as u64 + b.offset, needed, (payload.len() as u64).saturating_sub(b.offset)));
        }
        if index.insert(b.name.clone(), i).is_some() {
            return Err(ContainerError::Manifest(format!("duplicate blob `{}`", b.name)));
        }
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        blobs: header.blobs,
        index,
        payload,
        payload_start: json_end as u64,
    })
}

impl Container<'_> {
    pub fn expect_kind(&self, kind: &str) -> Result<(), ContainerError> {
        if self.kind != kind {
            return Err(ContainerError::Manifest(format!("expected a {kind} container, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M, ContainerError> {
        M::deserialize(&self.meta).map_err(|e| ContainerError::Manifest(e.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Absolute file offset of a blob.
    pub fn file_offset(&self, name: &str) -> Option<u64> {
        self.index.get(name).map(|&i| self.payload_start + self.blobs[i].offset)
    }

    pub fn blob(&self, name: &str) -> Result<Vec<f64>, ContainerError> {
        let b = &self.blobs[*self.index.get(name).ok_or_else(|| ContainerError::Missing(name.to_string()))?];
        let start = b.offset as usize;
        let bytes = &self.payload[start..start + 8 * b.len as usize];
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
