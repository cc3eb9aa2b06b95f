//! JSON run manifests: what ran, with which seeds, on which inputs, and the
//! hashes of what it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Cmd;

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let data = fs::read(path).with_context(|| format!("cannot hash {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&data)),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// The fully resolved invocation; re-running it reproduces the outputs.
    pub invocation: Cmd,
    pub config: RunConfig,
    pub seed: u64,
    pub jobs: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_s: f64,
    /// Command-specific results.
    pub summary: serde_json::Value,
}

/// Manifest location for a primary output file.
pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(MANIFEST_SUFFIX);
    PathBuf::from(s)
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(m)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a run manifest", path.display()))
}

/// Moves `p` from under `from` to the same place under `to`; paths
/// elsewhere are returned unchanged.
pub fn rebase(p: &Path, from: &Path, to: &Path) -> PathBuf {
    match p.strip_prefix(from) {
        Ok(rest) => to.join(rest),
        Err(_) => p.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_next_to_its_output() {
        assert_eq!(manifest_path(Path::new("/a/model.gcnm")), PathBuf::from("/a/model.gcnm.manifest.json"));
    }

    #[test]
    fn rebase_only_touches_paths_under_the_old_root() {
        let (a, b) = (Path::new("/runs/one"), Path::new("/runs/two"));
        assert_eq!(rebase(Path::new("/runs/one/x/ds.gcds"), a, b), PathBuf::from("/runs/two/x/ds.gcds"));
        assert_eq!(rebase(Path::new("/data/mini3.sys"), a, b), PathBuf::from("/data/mini3.sys"));
    }
}
