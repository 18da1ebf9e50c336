//! Run manifests written next to every stage's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "run.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Records the resolved settings and the content hash of every input, enough
/// to re-run the stage. Nothing time- or host-dependent is written.
pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    settings: &BTreeMap<String, String>,
    inputs: &[PathBuf],
) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), sha256_file(p)?);
    }
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "settings": settings,
        "inputs": hashes,
    });
    let path = out_dir.join(MANIFEST_NAME);
    std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}
