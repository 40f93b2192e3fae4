//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alteration::AlterationConfig;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::pretrain::TrainConfig;
use crate::probe::ProbeSettings;

/// Environment variable that overrides every configured seed.
pub const SEED_ENV: &str = "TDROP_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub alteration: AlterationConfig,
    pub probe: ProbeSettings,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, apply the seed override, and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.train.seed = seed;
            self.probe.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.alteration.validate()
    }
}
