//! Provenance record written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// TOML snapshot of the effective configuration.
    pub config: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Every regular file under `path` (or `path` itself), sorted.
pub fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
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

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: String, started_unix: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix,
            finished_unix: started_unix,
        }
    }

    pub fn add_inputs(&mut self, path: &Path) -> Result<()> {
        for f in files_under(path)? {
            self.inputs.push(FileDigest::of(&f)?);
        }
        Ok(())
    }

    pub fn add_outputs(&mut self, path: &Path) -> Result<()> {
        for f in files_under(path)? {
            self.outputs.push(FileDigest::of(&f)?);
        }
        Ok(())
    }

    /// Files whose current digest differs from the recorded one.
    pub fn verify(&self) -> Result<Vec<PathBuf>> {
        let mut changed = Vec::new();
        for d in self.inputs.iter().chain(&self.outputs) {
            match FileDigest::of(&d.path) {
                Ok(now) if now.sha256 == d.sha256 => {}
                _ => changed.push(d.path.clone()),
            }
        }
        Ok(changed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            FileDigest::of(&p).unwrap().sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn verify_detects_edits() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a"), b"1").unwrap();
        fs::write(dir.path().join("b"), b"2").unwrap();
        let mut m = RunManifest::new("test", 1, String::new(), unix_now());
        m.add_inputs(dir.path()).unwrap();
        assert_eq!(m.inputs.len(), 2);
        assert!(m.verify().unwrap().is_empty());
        let mp = dir.path().join("m.json");
        m.save(&mp).unwrap();
        assert_eq!(RunManifest::load(&mp).unwrap(), m);
        fs::write(dir.path().join("b"), b"3").unwrap();
        assert_eq!(m.verify().unwrap(), vec![dir.path().join("b")]);
    }
}
