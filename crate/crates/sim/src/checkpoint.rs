//! Parameter checkpoints: a JSON manifest of `(name, shape, offset)` entries
//! next to a flat little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use pfin_core::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Result, SimError};

const FORMAT: &str = "pfin-params";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    /// Blob file name, relative to the manifest.
    pub data: String,
    pub total_bytes: usize,
    pub entries: Vec<Entry>,
}

/// Manifest and blob for `params`; `data` names the blob file.
pub fn encode(params: &ParamSet, data: &str) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f64-le".into(),
        data: data.into(),
        total_bytes: blob.len(),
        entries,
    };
    (manifest, blob)
}

/// Inverse of [`encode`]. `path` only labels errors.
pub fn decode(manifest: &Manifest, blob: &[u8], path: &Path) -> Result<ParamSet> {
    let bad = |msg: String| SimError::format(path, msg);
    if manifest.format != FORMAT || manifest.version != VERSION || manifest.dtype != "f64-le" {
        return Err(bad(format!(
            "unsupported checkpoint {} v{} ({})",
            manifest.format, manifest.version, manifest.dtype
        )));
    }
    if blob.len() != manifest.total_bytes {
        return Err(bad(format!("blob has {} bytes, manifest says {}", blob.len(), manifest.total_bytes)));
    }
    let mut params = ParamSet::new();
    let mut expected = 0;
    for e in &manifest.entries {
        if e.offset != expected {
            return Err(bad(format!("entry `{}` at offset {} but expected {}", e.name, e.offset, expected)));
        }
        let len: usize = e.shape.iter().product();
        let end = e.offset + len * 8;
        let bytes = blob
            .get(e.offset..end)
            .ok_or_else(|| bad(format!("entry `{}` runs past the end of the blob", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        expected = end;
    }
    if expected != blob.len() {
        return Err(bad(format!("{} trailing bytes after the last entry", blob.len() - expected)));
    }
    Ok(params)
}

/// Writes `<stem>.json` and `<stem>.bin`, returning both paths.
pub fn save(params: &ParamSet, stem: &Path) -> Result<[PathBuf; 2]> {
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    let bin_name = bin_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| SimError::format(stem, "checkpoint stem is not valid UTF-8"))?;
    let (manifest, blob) = encode(params, bin_name);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json_path, json + "\n").map_err(io_at(&json_path))?;
    fs::write(&bin_path, blob).map_err(io_at(&bin_path))?;
    Ok([json_path, bin_path])
}

/// Loads a checkpoint from its JSON manifest.
pub fn load(json_path: &Path) -> Result<ParamSet> {
    let text = fs::read_to_string(json_path).map_err(io_at(json_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SimError::format(json_path, e.to_string()))?;
    let bin_path = json_path.with_file_name(&manifest.data);
    let blob = fs::read(&bin_path).map_err(io_at(&bin_path))?;
    decode(&manifest, &blob, json_path)
}
