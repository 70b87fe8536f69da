//! Stage manifests: input digests, parameters and output digests, used to skip
//! stages whose inputs have not changed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// Logical input name -> digest.
    pub inputs: BTreeMap<String, String>,
    pub params: Value,
    /// File path relative to the stage dir -> digest.
    pub outputs: BTreeMap<String, String>,
    /// Stage-specific counters, not part of the staleness check.
    #[serde(default)]
    pub info: Value,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::other(anyhow::anyhow!("{}: {e}", path.display()))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| io_err(dir, e))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn hash_file(h: &mut Sha256, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(&bytes);
    Ok(())
}

fn hash_tree(h: &mut Sha256, root: &Path) -> Result<()> {
    let mut files = Vec::new();
    files_under(root, &mut files)?;
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        hash_file(h, &f)?;
    }
    Ok(())
}

/// Digest of an artifact: a directory hashes every file under it; a JSON header
/// also covers the payload file or directory it names.
pub fn digest(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::Precondition(format!(
            "missing artifact {}",
            path.display()
        )));
    }
    let mut h = Sha256::new();
    if path.is_dir() {
        hash_tree(&mut h, path)?;
    } else {
        hash_file(&mut h, path)?;
        if let Some(payload) = payload_of(path) {
            if payload.is_dir() {
                hash_tree(&mut h, &payload)?;
            } else if payload.exists() {
                hash_file(&mut h, &payload)?;
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn payload_of(path: &Path) -> Option<PathBuf> {
    if path.extension()? != "json" {
        return None;
    }
    let v: Value = serde_json::from_slice(&fs::read(path).ok()?).ok()?;
    let name = v.get("payload")?.as_str()?;
    Some(path.parent().unwrap_or_else(|| Path::new(".")).join(name))
}

/// Digest of every file a finished stage wrote, manifest excluded.
pub fn output_digests(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    files_under(dir, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f
            .strip_prefix(dir)
            .unwrap_or(&f)
            .to_string_lossy()
            .replace('\\', "/");
        if rel == MANIFEST {
            continue;
        }
        let mut h = Sha256::new();
        hash_file(&mut h, &f)?;
        out.insert(rel, hex::encode(h.finalize()));
    }
    Ok(out)
}

pub fn load(dir: &Path) -> Option<Manifest> {
    let bytes = fs::read(dir.join(MANIFEST)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

pub fn save(dir: &Path, m: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(m).map_err(CliError::other)?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

/// Whether `dir` already holds the outputs of a run with these inputs and
/// parameters, untouched since.
pub fn is_fresh(
    dir: &Path,
    stage: &str,
    inputs: &BTreeMap<String, String>,
    params: &Value,
) -> bool {
    let Some(m) = load(dir) else {
        return false;
    };
    if m.stage != stage || &m.inputs != inputs || &m.params != params {
        log::warn!("{stage}: inputs or parameters changed since the last run; recomputing");
        return false;
    }
    match output_digests(dir) {
        Ok(d) if d == m.outputs => true,
        _ => {
            log::warn!("{stage}: outputs were modified; recomputing");
            false
        }
    }
}
