//! `manifest.json`: what ran, with which resolved config, and the SHA-256 of
//! every input and output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Fully resolved config of the command.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Named input paths (dataset base, checkpoint base, ...).
    pub inputs: BTreeMap<String, PathBuf>,
    /// Command-specific arguments outside the config file (split, axis, values).
    pub arguments: BTreeMap<String, serde_json::Value>,
    pub input_hashes: BTreeMap<String, String>,
    /// Output file name (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub started_at: String,
    pub duration_seconds: f64,
    /// Errors of failed sweep children, if any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes every regular file under `dir` except manifests (which carry wall
/// clock times), keyed by path relative to `dir` with `/` separators.
pub fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            if path.file_name().is_some_and(|f| f == MANIFEST_FILE) {
                continue;
            }
            let rel = path.strip_prefix(dir).expect("walked below dir");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.insert(key, sha256_file(&path)?);
        }
    }
    Ok(out)
}

pub fn write(manifest: &RunManifest, dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read(path: &Path) -> Result<RunManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line() as u64,
        field: "manifest".into(),
        message: e.to_string(),
    })
}
