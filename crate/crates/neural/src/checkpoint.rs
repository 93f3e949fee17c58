//! Single-file parameter archive: an 8-byte magic, a little-endian `u64`
//! header length, a JSON header, then every array packed as little-endian
//! `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Parameter, ParamStore};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"PRMTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    /// Free-form model kind, e.g. `"cvae"` or `"translator"`.
    pub kind: String,
    pub seed: u64,
    pub step: u64,
    /// Model configuration needed to rebuild the parameter layout.
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

/// Metadata supplied when saving.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub kind: String,
    pub seed: u64,
    pub step: u64,
    pub config: serde_json::Value,
}

pub fn to_bytes(store: &ParamStore, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut arrays = Vec::with_capacity(store.len());
    let mut offset = 0;
    for p in store.iter() {
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
            len: p.values.len(),
        });
        offset += p.values.len();
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: "f64".into(),
        kind: meta.kind.clone(),
        seed: meta.seed,
        step: meta.step,
        config: meta.config.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.iter() {
        for v in p.values.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, CheckpointHeader)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a parameter checkpoint".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION || header.dtype != "f64" {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} / dtype {}",
            header.format_version, header.dtype
        )));
    }
    let data = &bytes[16 + hlen..];
    let mut store = ParamStore::new();
    for a in &header.arrays {
        let start = a.offset * 8;
        let end = start + a.len * 8;
        let raw = data
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("array `{}` is truncated", a.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (rows, cols) = match a.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (1, other.iter().product()),
        };
        store.insert(Parameter::new(
            a.name.clone(),
            a.shape.clone(),
            Matrix::from_vec(rows, cols, values)?,
        )?)?;
    }
    Ok((store, header))
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, to_bytes(store, meta)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ParamStore, CheckpointHeader)> {
    from_bytes(&fs::read(path)?)
}

/// Loads `target`'s values from `source`, requiring identical layout.
pub fn copy_values(target: &mut ParamStore, source: &ParamStore) -> Result<()> {
    target.check_compatible(source)?;
    for (t, s) in target.iter_mut().zip(source.iter()) {
        t.values = s.values.clone();
    }
    Ok(())
}
