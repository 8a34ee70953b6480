use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: String,
    pub command: String,
    pub seed: u64,
    /// Stages that completed, in run order.
    pub stages: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

/// Output directory that records every file it writes.
pub struct OutDir {
    root: PathBuf,
    written: BTreeMap<String, Artifact>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| {
            CliError::Input(format!("cannot create output directory {}: {e}", root.display()))
        })?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, bytes)
            .map_err(|e| CliError::Estimation(format!("cannot write {}: {e}", path.display())))?;
        self.written.insert(
            name.to_string(),
            Artifact {
                path: name.to_string(),
                sha256: hex::encode(Sha256::digest(bytes)),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| CliError::Estimation(format!("cannot serialize {name}: {e}")))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Runs a CSV writer into memory and stores the result.
    pub fn write_csv(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> tailrisk::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn manifest(&self, command: &str, seed: u64, stages: &[&str]) -> Manifest {
        Manifest {
            schema_version: tailrisk::SCHEMA_VERSION.into(),
            command: command.into(),
            seed,
            stages: stages.iter().map(|s| s.to_string()).collect(),
            artifacts: self.written.values().cloned().collect(),
        }
    }

    pub fn write_manifest(&mut self, command: &str, seed: u64, stages: &[&str]) -> Result<(), CliError> {
        let m = self.manifest(command, seed, stages);
        self.write_json(MANIFEST, &m)?;
        self.written.remove(MANIFEST);
        Ok(())
    }
}
