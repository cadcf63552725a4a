//! Run manifests: what was run, on which inputs, producing which bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Effective configuration, TOML text.
    pub config: String,
    pub inputs: Vec<InputRecord>,
    /// Output files relative to the output directory, excluding this manifest.
    pub outputs: BTreeMap<String, String>,
}

fn hex_digest(h: Sha256) -> String {
    hex::encode(h.finalize())
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex_digest(Sha256::new_with_prefix(bytes))
}

/// Relative paths (with `/` separators) of every file under `root`, sorted.
pub fn list_files(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root)?;
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Content hash of a file, or of a directory tree (names and bytes).
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut h = Sha256::new();
        for rel in list_files(path)? {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(hash_bytes(&fs::read(path.join(&rel))?).as_bytes());
        }
        Ok(hex_digest(h))
    } else {
        Ok(hash_bytes(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
    }
}

pub fn hash_outputs(out: &Path) -> Result<BTreeMap<String, String>> {
    list_files(out)?
        .into_iter()
        .filter(|rel| rel != MANIFEST_FILE)
        .map(|rel| {
            let h = hash_bytes(&fs::read(out.join(&rel))?);
            Ok((rel, h))
        })
        .collect()
}

impl RunManifest {
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
