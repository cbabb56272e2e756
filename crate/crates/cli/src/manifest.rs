//! Per-stage provenance records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hybrid_core::checkpoint::file_digest;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub git_hash: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    /// Path (relative to the run directory when inside it) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn display_path(run_dir: &Path, path: &Path) -> String {
    path.strip_prefix(run_dir).unwrap_or(path).display().to_string()
}

fn resolve(run_dir: &Path, key: &str) -> PathBuf {
    let p = PathBuf::from(key);
    if p.is_absolute() {
        p
    } else {
        run_dir.join(p)
    }
}

fn digests(run_dir: &Path, paths: &[&Path]) -> Result<BTreeMap<String, String>, Failure> {
    paths
        .iter()
        .map(|p| Ok((display_path(run_dir, p), file_digest(p)?)))
        .collect()
}

impl Manifest {
    pub fn build(stage: &str, config: &RunConfig, run_dir: &Path, inputs: &[&Path], outputs: &[&Path]) -> Result<Self, Failure> {
        Ok(Manifest {
            stage: stage.to_string(),
            git_hash: git_hash(),
            seed: config.seed,
            config_hash: config.hash()?,
            config: config.clone(),
            inputs: digests(run_dir, inputs)?,
            outputs: digests(run_dir, outputs)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    /// Problems found when re-checking this manifest against the files on
    /// disk. Empty when everything matches.
    pub fn verify(&self, run_dir: &Path) -> Vec<String> {
        let mut problems = Vec::new();
        match self.config.hash() {
            Ok(h) if h == self.config_hash => {}
            Ok(h) => problems.push(format!(
                "{}: recorded config hash {} does not match its config ({h})",
                self.stage, self.config_hash
            )),
            Err(e) => problems.push(format!("{}: {e}", self.stage)),
        }
        if self.seed != self.config.seed {
            problems.push(format!("{}: recorded seed {} differs from config seed {}", self.stage, self.seed, self.config.seed));
        }
        for (key, digest) in self.outputs.iter().chain(&self.inputs) {
            let path = resolve(run_dir, key);
            match file_digest(&path) {
                Ok(d) if &d == digest => {}
                Ok(_) => problems.push(format!("{}: {key} changed since the stage ran", self.stage)),
                Err(e) => problems.push(format!("{}: {key}: {e}", self.stage)),
            }
        }
        problems
    }
}
