use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest of everything the stage's outputs depend on.
    pub fingerprint: String,
    /// Output path (relative to the output directory) to content SHA-256.
    pub outputs: BTreeMap<String, String>,
}

/// Record of completed stages under one output directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_fingerprint: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Fingerprint of any serializable description of a stage's inputs.
pub fn stage_fingerprint<T: Serialize>(inputs: &T) -> String {
    crate::fingerprint(&serde_json::to_string(inputs).expect("stage inputs serialize"))
}

/// Output directory plus its manifest.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    config_fingerprint: String,
    seed: u64,
}

impl Workspace {
    pub fn open(root: &Path, config_fingerprint: String, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), config_fingerprint, seed })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.path(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// True when `stage` completed with this fingerprint and its outputs are
    /// still on disk unchanged.
    pub fn is_cached(&self, stage: &str, fingerprint: &str) -> Result<bool> {
        let manifest = self.manifest()?;
        let Some(record) = manifest.stages.get(stage) else { return Ok(false) };
        if record.fingerprint != fingerprint {
            return Ok(false);
        }
        for (rel, sha) in &record.outputs {
            let path = self.path(rel);
            if !path.is_file() || &file_sha256(&path)? != sha {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Hashes `outputs` and stores the stage. The manifest is re-read first
    /// so processes working on other directions do not lose each other's
    /// records.
    pub fn record(&self, stage: &str, fingerprint: &str, outputs: &[&str]) -> Result<()> {
        let mut manifest = self.manifest()?;
        manifest.config_fingerprint = self.config_fingerprint.clone();
        manifest.seed = self.seed;
        let outputs = outputs
            .iter()
            .map(|rel| Ok((rel.to_string(), file_sha256(&self.path(rel))?)))
            .collect::<Result<_>>()?;
        manifest.stages.insert(stage.to_owned(), StageRecord { fingerprint: fingerprint.to_owned(), outputs });
        let path = self.path(MANIFEST_FILE);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}
