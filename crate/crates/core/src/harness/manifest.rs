//! Run manifests: the configuration, metrics and a hashed inventory of every
//! output file, written last and atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub kind: String,
    pub status: String,
    pub error: Option<String>,
    /// The configuration file, verbatim.
    pub config: String,
    pub metrics: BTreeMap<String, f64>,
    pub files: Vec<FileEntry>,
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileStatus {
    Ok,
    Missing,
    HashMismatch,
}

impl FileStatus {
    pub fn label(self) -> &'static str {
        match self {
            FileStatus::Ok => "ok",
            FileStatus::Missing => "missing",
            FileStatus::HashMismatch => "hash mismatch",
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Writes to a temporary sibling, then renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        write_atomic(&path, self.to_json()?.as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Status of every inventoried file relative to `base`.
    pub fn check_files(&self, base: &Path) -> Vec<(String, FileStatus)> {
        self.files
            .iter()
            .map(|f| {
                let status = match std::fs::read(base.join(&f.path)) {
                    Err(_) => FileStatus::Missing,
                    Ok(b) if sha256_hex(&b) != f.sha256 => FileStatus::HashMismatch,
                    Ok(_) => FileStatus::Ok,
                };
                (f.path.clone(), status)
            })
            .collect()
    }

    /// Every file hash-verifies and the embedded configuration re-validates.
    pub fn verify(&self, base: &Path) -> Result<()> {
        let bad: Vec<String> = self
            .check_files(base)
            .into_iter()
            .filter(|(_, s)| *s != FileStatus::Ok)
            .map(|(p, s)| format!("{p}: {}", s.label()))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Verification(bad.join(", ")));
        }
        ExperimentConfig::parse(&self.config)
            .map_err(|e| Error::Verification(format!("embedded config: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dir: &Path) -> RunManifest {
        let bytes = b"a,b\n1,2\n";
        write_atomic(&dir.join("x.csv"), bytes).unwrap();
        RunManifest {
            artifact_version: ARTIFACT_VERSION.into(),
            kind: "baseline".into(),
            status: "ok".into(),
            error: None,
            config: "[experiment]\nkind = \"baseline\"\noutput_dir = \"o\"\ntasks = [\"rotation\"]\n".into(),
            metrics: BTreeMap::from([("rotation/acc_s0".into(), 0.5)]),
            files: vec![FileEntry {
                path: "x.csv".into(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            }],
            timings: BTreeMap::new(),
        }
    }

    #[test]
    fn round_trip_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample(dir.path());
        let p = m.write(dir.path()).unwrap();
        let back = RunManifest::load(&p).unwrap();
        assert_eq!(back, m);
        back.verify(dir.path()).unwrap();
        std::fs::write(dir.path().join("x.csv"), "tampered").unwrap();
        assert!(matches!(back.verify(dir.path()), Err(Error::Verification(_))));
        std::fs::remove_file(dir.path().join("x.csv")).unwrap();
        assert_eq!(back.check_files(dir.path())[0].1, FileStatus::Missing);
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
