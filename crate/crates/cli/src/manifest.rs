use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started_unix: u64,
    pub elapsed_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn hash_files(paths: &[PathBuf]) -> anyhow::Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

/// Collects run metadata while a command executes.
pub struct Recorder {
    command: String,
    started: Instant,
    started_unix: u64,
    inputs: Vec<FileHash>,
}

impl Recorder {
    pub fn start(command: &str) -> Self {
        Recorder {
            command: command.to_string(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            inputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.extend(hash_files(&[path.to_path_buf()])?);
        Ok(())
    }

    /// Hashes every regular file in `out` (recursively, sorted) and writes
    /// the manifest next to them.
    pub fn finish(
        self,
        out: &Path,
        seed: u64,
        config: &RunConfig,
        convergence: Option<serde_json::Value>,
    ) -> anyhow::Result<RunManifest> {
        let mut files = Vec::new();
        list_files(out, &mut files)?;
        files.sort();
        let outputs = files
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: p.strip_prefix(out).unwrap_or(p).display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: config.clone(),
            inputs: self.inputs,
            outputs,
            started_unix: self.started_unix,
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
            convergence,
        };
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

fn list_files(dir: &Path, acc: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            list_files(&path, acc)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            acc.push(path);
        }
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
