// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-command run manifest: written when a command starts, sealed when it ends.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::fnv1a;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory.
    pub path: String,
    pub bytes: u64,
    /// FNV-1a of the contents, hex.
    pub fnv1a: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: RunStatus,
    pub calibration_mode: Option<String>,
    pub coefficient: Option<f64>,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    /// Creates the run directory and writes the opening manifest.
    pub fn open(dir: &Path, command: &str, config_hash: u64, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: format!("{config_hash:016x}"),
            seed,
            started_unix: now(),
            finished_unix: None,
            status: RunStatus::Running,
            calibration_mode: None,
            coefficient: None,
            error: None,
            files: Vec::new(),
        };
        m.write(dir)?;
        Ok(m)
    }

    /// Records the outcome and an inventory of everything else in `dir`.
    pub fn seal(mut self, dir: &Path, outcome: &Result<()>) -> Result<()> {
        self.finished_unix = Some(now());
        match outcome {
            Ok(()) => self.status = RunStatus::Complete,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e.to_string());
            }
        }
        self.files = inventory(dir)?;
        self.write(dir)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn inventory(dir: &Path) -> Result<Vec<FileEntry>> {
    let mut files = Vec::new();
    let mut stack: Vec<PathBuf> = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).expect("under run dir").to_string_lossy().replace('\\', "/");
            if rel == MANIFEST {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            files.push(FileEntry {
                path: rel,
                bytes: bytes.len() as u64,
                fnv1a: format!("{:016x}", fnv1a(&bytes)),
            });
        }
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn open_then_seal_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::open(dir.path(), "norms", 0xabc, 1).unwrap();
        let opened: RunManifest = serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(opened.status, RunStatus::Running);
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/a.csv"), b"x\n").unwrap();
        m.seal(dir.path(), &Ok(())).unwrap();
        let sealed: RunManifest = serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(sealed.status, RunStatus::Complete);
        assert_eq!(sealed.config_hash, "0000000000000abc");
        assert_eq!(sealed.files.len(), 1);
        assert_eq!((sealed.files[0].path.as_str(), sealed.files[0].bytes), ("sub/a.csv", 2));
        assert!(sealed.finished_unix.unwrap() >= sealed.started_unix);
    }
}
