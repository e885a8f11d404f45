//! Run configuration: one declarative TOML file with a table per
//! subsystem, mirroring the in-memory config structs field for field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GenieError, Result};
use crate::field::FieldConfig;
use crate::hashgrid::HashGridConfig;
use crate::render::RenderConfig;
use crate::splash::SplashConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: HashGridConfig,
    pub field: FieldConfig,
    pub splash: SplashConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Settings for the procedural toy scene: a small world inside
    /// `[-0.25, 0.25]^3`, a reduced hash table, and 5000 steps.
    pub fn toy() -> Self {
        let mut cfg = RunConfig::default();
        cfg.grid.bounds_min = [-0.25; 3];
        cfg.grid.bounds_max = [0.25; 3];
        cfg.grid.table_size = 1 << 16;
        cfg.render.samples_per_ray = 48;
        cfg.train.steps = 5000;
        cfg.train.densify.end_step = Some(2500);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.splash.validate()?;
        self.train.validate()?;
        if self.render.samples_per_ray < 2 {
            return Err(GenieError::InvalidConfig("render: samples_per_ray must be >= 2".into()));
        }
        if self.field.hidden == 0 {
            return Err(GenieError::InvalidConfig("field: hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GenieError::io(path, e))?;
        let cfg = Self::from_toml_str(&text).map_err(|e| GenieError::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
