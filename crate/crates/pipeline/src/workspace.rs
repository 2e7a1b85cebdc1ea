//! On-disk workspace: stage directories, exclusive lock, checksums and the
//! per-stage provenance records.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

pub const LOCK_FILE: &str = "cariface.lock";

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::format(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::format(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

/// Removes and recreates a stage output directory.
pub fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    create_dir(dir)
}

/// Inputs and outputs of one completed stage, keyed by workspace-relative path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// An open workspace directory held exclusively until dropped.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    lock: PathBuf,
}

impl Workspace {
    /// Creates the directory if needed and takes the lock file.
    pub fn open(root: &Path) -> Result<Self> {
        create_dir(root)?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => return Err(PipelineError::Locked(lock)),
            Err(e) => return Err(PipelineError::io(&lock, e)),
        }
        Ok(Workspace {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Workspace-relative form of `path`, with `/` separators.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    /// Checksums of the given workspace-relative files.
    pub fn checksums(&self, rels: &[String]) -> Result<BTreeMap<String, String>> {
        rels.iter()
            .map(|r| Ok((r.clone(), file_sha256(&self.path(r))?)))
            .collect()
    }

    /// Fails unless every recorded file still has its recorded checksum.
    pub fn verify(&self, recorded: &BTreeMap<String, String>, owner: &Path) -> Result<()> {
        for (rel, want) in recorded {
            let path = self.path(rel);
            if !path.exists() {
                return Err(PipelineError::provenance(owner, format!("{rel} is missing")));
            }
            let got = file_sha256(&path)?;
            if &got != want {
                return Err(PipelineError::provenance(
                    owner,
                    format!(
                        "{rel} changed since it was recorded (expected {}, found {})",
                        &want[..12],
                        &got[..12]
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn write_record(&self, dir: &str, record: &StageRecord) -> Result<()> {
        write_json(&self.path(&format!("{dir}/stage.json")), record)
    }

    /// Reads a stage record, failing with a dependency error when the stage
    /// has not run.
    pub fn read_record(&self, dir: &str, stage: &'static str) -> Result<StageRecord> {
        let path = self.path(&format!("{dir}/stage.json"));
        if !path.exists() {
            return Err(PipelineError::Dependency {
                stage,
                what: format!("{dir}/stage.json"),
            });
        }
        let record: StageRecord = read_json(&path)?;
        self.verify(&record.outputs, &path)?;
        Ok(record)
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        assert!(matches!(Workspace::open(dir.path()), Err(PipelineError::Locked(_))));
        drop(ws);
        assert!(Workspace::open(dir.path()).is_ok());
    }

    #[test]
    fn verify_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        write_text(&ws.path("a/b.txt"), "one").unwrap();
        let sums = ws.checksums(&["a/b.txt".to_string()]).unwrap();
        ws.verify(&sums, Path::new("x")).unwrap();
        write_text(&ws.path("a/b.txt"), "two").unwrap();
        assert!(matches!(
            ws.verify(&sums, Path::new("x")),
            Err(PipelineError::Provenance { .. })
        ));
        assert_eq!(ws.relative(&ws.path("a/b.txt")), "a/b.txt");
    }

    #[test]
    fn missing_record_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        let err = ws.read_record("shape", "train-shape").unwrap_err();
        assert!(err.to_string().contains("train-shape"), "{err}");
    }
}
