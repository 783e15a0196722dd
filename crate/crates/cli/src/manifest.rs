//! Run manifests: the command, the resolved seed, the full configuration and the
//! hashes of every file read or written. No timestamps, so reruns compare equal.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rfrlf_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// File name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &RunConfig) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            seed,
            config_hash: config.hash()?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: config.clone(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        self.outputs.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
