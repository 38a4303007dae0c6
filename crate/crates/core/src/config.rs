//! TOML run configuration with defaults, validation and a resolved echo.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSequenceConfig;
use crate::error::{config_err, Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::tracker::TrackerConfig;
use crate::train::TrainConfig;

/// Annotated configuration with every default spelled out.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");
/// Reduced configuration used by the desk-scale learning check.
pub const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root; falls back to `MAPNET_DATA` when unset.
    pub root: Option<PathBuf>,
    /// Synthetic sequences generated when no root is available.
    pub sequences: usize,
    pub seed: u64,
    pub synthetic: SyntheticSequenceConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            sequences: 5,
            seed: 0,
            synthetic: SyntheticSequenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for parameter initialization.
    pub init_seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Syncs derived fields and checks every constraint.
    pub fn resolve(mut self) -> Result<Self> {
        self.model.backbone.output_dim = self.model.d_model;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights().validate()?;
        self.train.validate()?;
        self.tracker.validate()?;
        if self.data.sequences == 0 {
            return Err(config_err!("data.sequences must be positive"));
        }
        self.data.synthetic.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err!("{}", e.to_string().trim_end()))?;
        cfg.resolve()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err!("cannot serialize config: {e}"))
    }

    /// Writes the resolved configuration next to a run's outputs.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("resolved_config.toml");
        fs::write(&p, self.to_toml()?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn desk() -> Self {
        Self::from_toml(DESK_CONFIG).expect("shipped desk config is valid")
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => config_err!("{}: {m}", path.display()),
        o => o,
    })
}
