//! Run manifests: what a command read, which seeds and config it used, and
//! checksums of what it wrote. Manifests found next to inputs are linked by
//! checksum, so every artifact traces back through the chain of runs.
//!
//! A command writing a directory puts `run.json` inside it; a command
//! writing a single file puts `<file>.run.json` beside it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "run.json";
pub const SIDECAR_SUFFIX: &str = ".run.json";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentRef {
    /// Directory of the upstream run.
    pub path: String,
    pub command: String,
    /// Checksum of the upstream manifest file.
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seeds: BTreeMap<String, u64>,
    pub config_sha256: Option<String>,
    pub config: Option<serde_json::Value>,
    pub inputs: Vec<ArtifactRef>,
    pub parents: Vec<ParentRef>,
    pub outputs: Vec<ArtifactRef>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            format_version: MANIFEST_FORMAT,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.into(),
            seeds: BTreeMap::new(),
            config_sha256: None,
            config: None,
            inputs: Vec::new(),
            parents: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    /// Record the effective configuration and its hash.
    pub fn config<C: Serialize>(mut self, config: &C) -> Result<Self> {
        let value = serde_json::to_value(config)?;
        self.config_sha256 = Some(sha256_hex(&serde_json::to_vec(&value)?));
        self.config = Some(value);
        Ok(self)
    }

    /// Record an input file or directory, linking the manifest of the run
    /// that produced it when there is one.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        for (rel, sha) in checksums(path)? {
            self.inputs.push(ArtifactRef {
                path: display_join(path, &rel),
                sha256: sha,
            });
        }
        if let Some(manifest) = manifest_for(path) {
            let bytes = fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let parent: RunManifest = serde_json::from_slice(&bytes)?;
            let sha = sha256_hex(&bytes);
            if !self.parents.iter().any(|p| p.manifest_sha256 == sha) {
                self.parents.push(ParentRef {
                    path: manifest.display().to_string(),
                    command: parent.command,
                    manifest_sha256: sha,
                });
            }
        }
        Ok(())
    }

    /// Checksum every file under `dir` (except the manifest) as outputs and
    /// write the manifest there. Returns the manifest checksum.
    pub fn write(mut self, dir: &Path) -> Result<String> {
        self.outputs = checksums(dir)?
            .into_iter()
            .filter(|(rel, _)| rel != Path::new(MANIFEST_FILE))
            .map(|(rel, sha)| ArtifactRef {
                path: rel.display().to_string(),
                sha256: sha,
            })
            .collect();
        self.store(&dir.join(MANIFEST_FILE))
    }

    /// Record one output file and write `<file>.run.json` beside it.
    pub fn write_sidecar(mut self, file: &Path) -> Result<String> {
        let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs = vec![ArtifactRef {
            path: name,
            sha256: file_sha256(file)?,
        }];
        self.store(&sidecar_path(file))
    }

    fn store(&self, path: &Path) -> Result<String> {
        let bytes = serde_json::to_vec_pretty(self)?;
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }
}

pub fn sidecar_path(file: &Path) -> PathBuf {
    let mut name = file.as_os_str().to_owned();
    name.push(SIDECAR_SUFFIX);
    PathBuf::from(name)
}

/// The manifest of the run that produced `path`: its sidecar for a file
/// (falling back to the enclosing directory's), `run.json` for a directory.
pub fn manifest_for(path: &Path) -> Option<PathBuf> {
    let candidates = if path.is_dir() {
        vec![path.join(MANIFEST_FILE)]
    } else {
        let mut c = vec![sidecar_path(path)];
        if let Some(dir) = path.parent() {
            c.push(dir.join(MANIFEST_FILE));
        }
        c
    };
    candidates.into_iter().find(|p| p.is_file())
}

fn display_join(base: &Path, rel: &Path) -> String {
    if rel.as_os_str().is_empty() {
        base.display().to_string()
    } else {
        base.join(rel).display().to_string()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Sorted `(relative path, sha256)` of a file, or of every file under a
/// directory.
pub fn checksums(path: &Path) -> Result<Vec<(PathBuf, String)>> {
    if path.is_file() {
        return Ok(vec![(PathBuf::new(), file_sha256(path)?)]);
    }
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let dir = path.join(&rel);
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let child = rel.join(entry.file_name());
            if entry.path().is_dir() {
                stack.push(child);
            } else {
                out.push((child.clone(), file_sha256(&path.join(&child))?));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<Option<RunManifest>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_slice(&bytes)?))
}
