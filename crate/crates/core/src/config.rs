//! Sectioned TOML run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::default_scenes;
use crate::error::{Error, Result};
use crate::model::N_SCENES;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Scene names; the position of a name is its class index.
    pub scenes: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { scenes: default_scenes() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.scenes.len() != N_SCENES {
            return Err(Error::Config(format!("data.scenes must list {N_SCENES} scenes, got {}", self.data.scenes.len())));
        }
        let mut sorted = self.data.scenes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.data.scenes.len() {
            return Err(Error::Config("data.scenes has duplicates".into()));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
