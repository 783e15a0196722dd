//! Run configuration: one TOML file holds everything a run depends on.

use std::fs;
use std::path::{Path, PathBuf};

use rfrlf_core::envs::EnvConfig;
use rfrlf_core::trainer::{
    CollectionConfig, EvalConfig, ExpertConfig, Phase1Config, Phase2Config, PipelineConfig, TrainConfig,
};
use rfrlf_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;

/// The only environment variable a run reads.
pub const SEED_ENV: &str = "RFRLF_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub collection: CollectionConfig,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub expert: ExpertConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            env: EnvConfig::default(),
            collection: CollectionConfig::default(),
            phase1: Phase1Config::default(),
            phase2: Phase2Config::default(),
            expert: ExpertConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            phase1: self.phase1.clone(),
            phase2: self.phase2.clone(),
            collection: self.collection.clone(),
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            env: self.env.clone(),
            train: self.train(),
            expert: self.expert.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()
    }

    /// Canonical TOML rendering; every field is written, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// SHA-256 of the canonical rendering, so formatting and key order in the
    /// source file do not change it. Output paths do not affect results and are
    /// left out.
    pub fn hash(&self) -> Result<String> {
        let cfg = RunConfig {
            paths: Paths::default(),
            ..self.clone()
        };
        Ok(sha256_hex(cfg.to_toml()?.as_bytes()))
    }
}

/// `--seed` beats `RFRLF_SEED`, which beats the file.
pub fn resolve_seed(flag: Option<u64>, env_value: Option<&str>, file: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env_value {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        None => Ok(file),
    }
}

pub(crate) fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
