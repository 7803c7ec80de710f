//! File helpers: JSON, raw bytes, CSV and content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::PipelineError;

pub fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|e| PipelineError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(|e| PipelineError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))
}

/// Writes rows of serialisable records with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Validation(e.to_string()))?;
    write_bytes(path, &bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Every regular file below `root`, relative and sorted.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
        for entry in fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
            let entry = entry.map_err(|e| PipelineError::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

/// Content hash of every file below `root`, keyed by relative path with `/`
/// separators; files named in `skip` are left out.
pub fn hash_tree(root: &Path, skip: &[&str]) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut out = BTreeMap::new();
    for rel in list_files(root)? {
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if skip.contains(&key.as_str()) {
            continue;
        }
        out.insert(key, sha256_hex(&read_bytes(&root.join(&rel))?));
    }
    Ok(out)
}

/// Fails when `path` already exists; artifacts are never overwritten.
pub fn ensure_fresh(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        return Err(PipelineError::Validation(format!(
            "{} already exists; write to a new run directory",
            path.display()
        )));
    }
    Ok(())
}
