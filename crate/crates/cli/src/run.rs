// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-invocation run directories and their manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Everything needed to rerun an invocation.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    pub git_describe: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input path to hex SHA-256. Directories are hashed file by file.
    pub inputs: BTreeMap<String, String>,
}

/// A freshly created output directory. Existing directories are never
/// reused.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<base>/<command>-<n>` with the smallest unused `n`.
    pub fn create(base: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(base).with_context(|| format!("creating {}", base.display()))?;
        for n in 0..100_000 {
            let path = base.join(format!("{command}-{n:04}"));
            match std::fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
            }
        }
        bail!("no free run directory under {}", base.display())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Adds `path` to `inputs`; a directory contributes each regular file in it.
pub fn record_input(inputs: &mut BTreeMap<String, String>, path: &Path) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for p in entries {
            inputs.insert(p.display().to_string(), hash_file(&p)?);
        }
    } else {
        inputs.insert(path.display().to_string(), hash_file(path)?);
    }
    Ok(())
}

/// Deterministic per-stage seed derived from the run seed.
pub fn sub_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_are_never_reused() {
        let base = tempfile::tempdir().unwrap();
        let a = RunDir::create(base.path(), "prune").unwrap();
        let b = RunDir::create(base.path(), "prune").unwrap();
        assert_ne!(a.path, b.path);
        assert!(a.path.ends_with("prune-0000") && b.path.ends_with("prune-0001"));
    }

    #[test]
    fn sub_seeds_differ_by_stage_and_repeat() {
        assert_eq!(sub_seed(3, "prune"), sub_seed(3, "prune"));
        assert_ne!(sub_seed(3, "prune"), sub_seed(3, "data"));
        assert_ne!(sub_seed(3, "prune"), sub_seed(4, "prune"));
    }

    #[test]
    fn directory_inputs_hash_every_file() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("a.txt"), "x").unwrap();
        std::fs::write(d.path().join("b.txt"), "y").unwrap();
        let mut m = BTreeMap::new();
        record_input(&mut m, d.path()).unwrap();
        assert_eq!(m.len(), 2);
        // SHA-256 of "x".
        assert!(m
            .values()
            .any(|h| h == "2d711642b726b04401627ca9fbac32f5c8530fb1903cc4db02258717921a4881"));
    }
}
