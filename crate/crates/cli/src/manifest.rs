//! Run manifests and content hashes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PREFIX: &str = "run_manifest.";
/// digest sidecar written next to a synthetic cohort
pub const COHORT_DIGEST: &str = "cohort.sha256";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// hash of command, effective settings and input hashes
    pub fingerprint: String,
    pub config_hash: Option<String>,
    pub cohort_hash: Option<String>,
    pub seed: u64,
    pub versions: Versions,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// relative to the output directory
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub spes_cli: String,
    pub spes_core: String,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            spes_cli: env!("CARGO_PKG_VERSION").into(),
            spes_core: spes_core::VERSION.into(),
        }
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn path_for(out: &Path, command: &str) -> PathBuf {
    out.join(format!("{PREFIX}{command}.json"))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_bytes(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex(&h.finalize())
}

fn walk(root: &Path, dir: &Path, files: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(root, &path, files)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root").to_path_buf();
            let name = rel.to_string_lossy();
            if !name.starts_with(PREFIX) && name != COHORT_DIGEST {
                files.push(rel);
            }
        }
    }
    Ok(())
}

/// SHA-256 over every file below `dir` (relative path and bytes, sorted by
/// path), run manifests and the cohort digest excluded.
pub fn hash_dir(dir: &Path) -> std::io::Result<String> {
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let name = rel.to_string_lossy().replace('\\', "/");
        let bytes = fs::read(dir.join(&rel))?;
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

pub fn read(out: &Path, command: &str) -> Option<RunManifest> {
    let text = fs::read_to_string(path_for(out, command)).ok()?;
    serde_json::from_str(&text).ok()
}

/// A previous run with the same fingerprint whose outputs all still exist.
pub fn up_to_date(out: &Path, command: &str, fingerprint: &str) -> bool {
    read(out, command).is_some_and(|m| m.fingerprint == fingerprint && m.outputs.iter().all(|o| out.join(o).exists()))
}

pub fn write(out: &Path, m: &RunManifest) -> std::io::Result<()> {
    fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(m).expect("manifest serialises");
    let path = path_for(out, &m.command);
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text + "\n")?;
    fs::rename(tmp, path)
}
