//! Run manifest: one JSON record per run with checksums of every output.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub kind: &'static str,
    pub command: String,
    pub status: String,
    pub exit_code: i32,
    pub config_hash: String,
    pub code_version: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub started: f64,
    pub finished: f64,
    pub files: Vec<FileEntry>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> std::io::Result<(String, u64)> {
    let bytes = fs::read(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Tracks the files a command writes below its output directory.
#[derive(Debug)]
pub struct Outputs {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: PathBuf) -> std::io::Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Outputs { dir, files: Vec::new() })
    }

    /// Path for a new output file, recorded for the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        if !self.files.contains(&p) {
            self.files.push(p.clone());
        }
        p
    }

    pub fn entries(&self) -> std::io::Result<Vec<FileEntry>> {
        let mut out = Vec::new();
        for p in &self.files {
            if !p.exists() {
                continue;
            }
            let (sha256, bytes) = sha256_file(p)?;
            let name = p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().into_owned();
            out.push(FileEntry { path: name, sha256, bytes });
        }
        Ok(out)
    }
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let p = dir.join("manifest.json");
        let mut text = serde_json::to_string(self).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(&p, text)?;
        Ok(p)
    }
}
