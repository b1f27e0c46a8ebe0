//! Atomic artifact writes, content hashes and per-stage manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Fail with exit code 3 unless `path` exists.
pub fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact(path.to_path_buf()))
    }
}

/// Write through a sibling temp file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    require(path)?;
    let text = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

/// Produce bytes with a writer-style serializer, then store them atomically.
pub fn write_with<F>(path: &Path, f: F) -> CliResult<()>
where
    F: FnOnce(&mut Vec<u8>) -> ehrsig_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

/// Record of one stage run. Contains no timestamps so reruns compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    /// Hash over the stage's parameters and input hashes.
    pub fingerprint: String,
    pub params: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Inputs and parameters that determine a stage's outputs.
pub struct StageKey {
    pub stage: &'static str,
    pub params: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
}

impl StageKey {
    pub fn new(stage: &'static str, params: serde_json::Value) -> Self {
        StageKey { stage, params, seeds: BTreeMap::new(), inputs: BTreeMap::new() }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    /// Hash an input file, failing with its name if it is absent.
    pub fn input(mut self, name: &str, path: &Path) -> CliResult<Self> {
        require(path)?;
        self.inputs.insert(name.to_string(), sha256_file(path)?);
        Ok(self)
    }

    pub fn fingerprint(&self) -> String {
        let doc = serde_json::json!({
            "stage": self.stage,
            "version": env!("CARGO_PKG_VERSION"),
            "params": self.params,
            "seeds": self.seeds,
            "inputs": self.inputs,
        });
        sha256_bytes(doc.to_string().as_bytes())
    }
}

/// A stage's output directory.
pub struct StageDir {
    pub dir: PathBuf,
}

impl StageDir {
    pub fn new(work: &Path, stage: &str) -> Self {
        StageDir { dir: work.join(stage) }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST)
    }

    pub fn load_manifest(&self) -> Option<StageManifest> {
        let text = fs::read(self.manifest_path()).ok()?;
        serde_json::from_slice(&text).ok()
    }

    /// True when the recorded run used the same fingerprint and every
    /// recorded output is still present with its recorded hash.
    pub fn is_current(&self, key: &StageKey) -> bool {
        let Some(m) = self.load_manifest() else {
            return false;
        };
        m.fingerprint == key.fingerprint()
            && m.outputs.iter().all(|(name, hash)| sha256_file(&self.path(name)).ok().as_deref() == Some(hash))
    }

    pub fn finish(&self, key: StageKey, outputs: &[&str]) -> CliResult<StageManifest> {
        let mut hashes = BTreeMap::new();
        for name in outputs {
            hashes.insert(name.to_string(), sha256_file(&self.path(name))?);
        }
        let manifest = StageManifest {
            stage: key.stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            fingerprint: key.fingerprint(),
            params: key.params,
            seeds: key.seeds,
            inputs: key.inputs,
            outputs: hashes,
        };
        write_json(&self.manifest_path(), &manifest)?;
        Ok(manifest)
    }
}
