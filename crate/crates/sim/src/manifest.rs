//! Content-hash manifest over every file an experiment writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{io_at, Result, SimError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Relative path (with `/` separators) to SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    /// Hashes every file under `dir` except the manifest itself.
    pub fn build(dir: &Path) -> Result<Self> {
        let mut files = BTreeMap::new();
        for entry in WalkDir::new(dir).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let path = e.path().unwrap_or(dir).to_path_buf();
                SimError::Io {
                    path,
                    source: e.into(),
                }
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if key == MANIFEST_FILE {
                continue;
            }
            let bytes = fs::read(entry.path()).map_err(io_at(entry.path()))?;
            files.insert(key, hex::encode(Sha256::digest(&bytes)));
        }
        Ok(Manifest { files })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_at(&path))?;
        serde_json::from_str(&text).map_err(|e| SimError::format(&path, e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(io_at(&path))
    }

    /// First difference against `other`, described for humans.
    pub fn difference(&self, other: &Manifest) -> Option<String> {
        for (name, hash) in &self.files {
            match other.files.get(name) {
                None => return Some(format!("`{name}` is missing")),
                Some(h) if h != hash => return Some(format!("`{name}` has hash {h}, expected {hash}")),
                Some(_) => {}
            }
        }
        other
            .files
            .keys()
            .find(|k| !self.files.contains_key(*k))
            .map(|k| format!("unexpected file `{k}`"))
    }
}

/// Re-hashes the files in `dir` against its stored manifest.
pub fn verify(dir: &Path) -> Result<()> {
    let stored = Manifest::read(dir)?;
    match stored.difference(&Manifest::build(dir)?) {
        None => Ok(()),
        Some(detail) => Err(SimError::Manifest {
            dir: dir.to_path_buf(),
            detail,
        }),
    }
}
