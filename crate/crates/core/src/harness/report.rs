//! CSV tables and per-run manifests.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::retrieval::{sha256_hex, INDEX_FORMAT_VERSION};

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Versions {
    pub prmt: &'static str,
    pub checkpoint_format: u32,
    pub index_format: u32,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            prmt: env!("CARGO_PKG_VERSION"),
            checkpoint_format: prmt_neural::checkpoint::FORMAT_VERSION,
            index_format: INDEX_FORMAT_VERSION,
        }
    }
}

/// Description of one run; contains no timestamps so identical runs
/// produce identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub versions: Versions,
    pub outputs: Vec<OutputFile>,
}

/// Writes `manifest.json` into `dir`, hashing each output file; output
/// paths are recorded relative to `dir`.
pub fn write_manifest<C: Serialize>(
    dir: impl AsRef<Path>,
    command: &str,
    seeds: &[u64],
    config: &C,
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut files = Vec::with_capacity(outputs.len());
    for p in outputs {
        let rel = p.strip_prefix(dir).unwrap_or(p);
        files.push(OutputFile { path: rel.display().to_string(), sha256: sha256_hex(&std::fs::read(p)?) });
    }
    let manifest = Manifest {
        command: command.to_string(),
        seeds: seeds.to_vec(),
        config: serde_json::to_value(config)?,
        versions: Versions::current(),
        outputs: files,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}
