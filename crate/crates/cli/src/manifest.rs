use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use qtl_core::training::TrainConfig;
use qtl_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Record of one successful command: what went in, what came out, and the
/// digests of every emitted file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, Artifact>,
    pub outputs: BTreeMap<String, Artifact>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with_config(mut self, config: &TrainConfig) -> Self {
        for line in config.to_kv().lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.config.insert(k.to_string(), v.to_string());
            }
        }
        self
    }

    fn artifact(path: &Path) -> Result<Artifact> {
        Ok(Artifact {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.to_string(), Self::artifact(path)?);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<()> {
        self.outputs.insert(name.to_string(), Self::artifact(path)?);
        Ok(())
    }

    pub fn extra(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.extra.insert(key.to_string(), value.into());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_match_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, b"abc").unwrap();
        let mut m = RunManifest::new("test", Some(1));
        m.output("a", &p).unwrap();
        assert_eq!(
            m.outputs["a"].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let cfg = TrainConfig::default();
        let m = m.with_config(&cfg);
        assert_eq!(m.config["hidden"], "200");
    }
}
