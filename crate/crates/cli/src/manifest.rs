use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const THREADS_ENV: &str = "VITA_THREADS";

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub config_fingerprint: Option<String>,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_s: f64,
    pub tool_version: String,
    pub threads: usize,
}

impl RunManifest {
    pub fn new(command: &str, flags: &impl Serialize, threads: usize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            flags: serde_json::to_value(flags)?,
            seeds: BTreeMap::new(),
            config_fingerprint: None,
            artifacts: Vec::new(),
            wall_clock_s: 0.0,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            threads,
        })
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    /// Hashes `path` and records it relative to `base` when possible.
    pub fn add_artifact(&mut self, path: &Path, base: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading artifact {}", path.display()))?;
        let rel = path.strip_prefix(base).unwrap_or(path);
        self.artifacts.push(Artifact {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hex(&Sha256::digest(&bytes)),
        });
        Ok(())
    }

    /// Hashes every regular file under `dir` in sorted order.
    pub fn add_tree(&mut self, dir: &Path, skip: &Path) -> Result<()> {
        for path in walk(dir)? {
            if path != skip {
                self.add_artifact(&path, dir)?;
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Manifest path for a single-file output: `<file>.manifest.json`.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}
