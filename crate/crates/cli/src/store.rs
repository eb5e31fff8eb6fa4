//! Content-hash addressed artifact directory plus per-command run manifests.
//!
//! Every artifact is written as `<kind>-<hash12>.<ext>` (first 12 hex chars
//! of its SHA-256), and every command records a `<kind>.manifest.json` with
//! its config snapshot, seed, input hashes, output paths and wall time.
//! Downstream commands resolve their prerequisites through these manifests
//! and verify the recorded hashes before trusting a file.

use crate::error::CliError;
use geoplace_core::hash::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_snapshot: String,
    /// Input name -> SHA-256 of the consumed file.
    pub inputs: BTreeMap<String, String>,
    /// Output name -> artifact reference.
    pub artifacts: BTreeMap<String, ArtifactRef>,
    pub wall_ms: u64,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_snapshot: String) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config_snapshot,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            wall_ms: 0,
        }
    }

    pub fn input(&mut self, name: &str, sha256: &str) -> &mut Self {
        self.inputs.insert(name.to_string(), sha256.to_string());
        self
    }

    pub fn artifact(&mut self, name: &str, path: &Path, sha256: &str) -> &mut Self {
        self.artifacts.insert(
            name.to_string(),
            ArtifactRef {
                path: path.display().to_string(),
                sha256: sha256.to_string(),
            },
        );
        self
    }
}

pub struct ArtifactStore {
    dir: PathBuf,
}

impl ArtifactStore {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `bytes` as `<kind>-<hash12>.<ext>`; rerunning with identical
    /// content lands on the identical path.
    pub fn write(&self, kind: &str, ext: &str, bytes: &[u8]) -> Result<(PathBuf, String), CliError> {
        let hash = sha256_hex(bytes);
        let path = self.dir.join(format!("{kind}-{}.{ext}", &hash[..12]));
        std::fs::write(&path, bytes)?;
        Ok((path, hash))
    }

    pub fn write_manifest(&self, kind: &str, manifest: &Manifest) -> Result<PathBuf, CliError> {
        let path = self.dir.join(format!("{kind}.manifest.json"));
        let json = serde_json::to_string_pretty(manifest)
            .map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(&path, json)?;
        Ok(path)
    }

    pub fn read_manifest(&self, kind: &str) -> Result<Manifest, CliError> {
        let path = self.dir.join(format!("{kind}.manifest.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Missing(format!(
                "run `geoplace {kind}` first ({}: {e})",
                path.display()
            ))
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Format(e.to_string()))
    }

    /// Resolves a named artifact of an earlier command and verifies that the
    /// file on disk still matches the recorded hash.
    pub fn resolve(&self, manifest_kind: &str, artifact: &str) -> Result<(PathBuf, Vec<u8>, String), CliError> {
        let manifest = self.read_manifest(manifest_kind)?;
        let art = manifest.artifacts.get(artifact).ok_or_else(|| {
            CliError::Missing(format!(
                "manifest `{manifest_kind}` has no artifact `{artifact}`"
            ))
        })?;
        let path = PathBuf::from(&art.path);
        let bytes = std::fs::read(&path).map_err(|e| {
            CliError::Missing(format!("artifact {}: {e}", path.display()))
        })?;
        let found = sha256_hex(&bytes);
        if found != art.sha256 {
            return Err(CliError::HashMismatch(format!(
                "artifact {} changed since `{manifest_kind}` ran: recorded {}, found {found}",
                path.display(),
                art.sha256
            )));
        }
        Ok((path, bytes, found))
    }
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}
