//! Run manifest: what was run, with which seeds, and which files it produced.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::blob::write_atomic;
use crate::error::{Result, VllError};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSeed {
    pub cell: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discard {
    pub cell: String,
    pub seed_index: usize,
    pub dataset_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub mode: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub seeds: Vec<CellSeed>,
    /// Paths relative to the output directory, sorted.
    pub files: Vec<PathBuf>,
    pub discards: Vec<Discard>,
    pub started_unix: u64,
    pub wall_seconds: f64,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.canonical().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let started = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            mode: cfg.mode.tag().to_string(),
            master_seed: cfg.master_seed,
            config_hash: config_hash(cfg),
            seeds: vec![],
            files: vec![],
            discards: vec![],
            started_unix: started,
            wall_seconds: 0.0,
        }
    }

    pub fn add_file(&mut self, rel: impl Into<PathBuf>) {
        let p = rel.into();
        if !self.files.contains(&p) {
            self.files.push(p);
        }
    }

    pub fn write(&mut self, out_dir: &Path) -> Result<()> {
        self.files.sort();
        for f in &self.files {
            if !out_dir.join(f).is_file() {
                return Err(VllError::Schema(format!("manifest lists missing file {}", f.display())));
            }
        }
        let json = serde_json::to_vec_pretty(self).map_err(|e| VllError::Schema(e.to_string()))?;
        write_atomic(&out_dir.join(MANIFEST_NAME), &json)
    }

    pub fn read(out_dir: &Path) -> Result<Self> {
        let bytes = std::fs::read(out_dir.join(MANIFEST_NAME))?;
        serde_json::from_slice(&bytes).map_err(|e| VllError::Schema(e.to_string()))
    }
}

/// Files under `dir` (relative, sorted), excluding the manifest itself.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in std::fs::read_dir(dir)? {
            let e = e?;
            let p = e.path();
            if e.file_type()?.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(p.strip_prefix(root).expect("child of root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = vec![];
    walk(dir, dir, &mut out)?;
    out.retain(|p| p != Path::new(MANIFEST_NAME));
    out.sort();
    Ok(out)
}
