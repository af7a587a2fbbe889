//! Versioned TOML run configuration.
//!
//! ```toml
//! version = 1
//!
//! [model]
//! frames = 24
//!
//! [train]
//! epochs = 30
//!
//! [synth]
//! seed = 7
//! ```
//!
//! Every section and field is optional and falls back to its default.
//! Unknown keys are rejected so that typos surface as errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.synth.classes.len() != self.model.classes {
            return Err(Error::Config(format!(
                "synthetic data has {} classes but the model expects {}",
                self.synth.classes.len(),
                self.model.classes
            )));
        }
        if self.synth.frames != self.model.frames || self.synth.points != self.model.points {
            return Err(Error::Config(format!(
                "synthetic samples are {}×{} but the model expects {}×{} (frames × points)",
                self.synth.frames, self.synth.points, self.model.frames, self.model.points
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn sections_are_optional() {
        let cfg = RunConfig::parse("version = 1\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(matches!(RunConfig::parse("version = 1\n[train]\nepoch = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("version = 2\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[train]\nepochs = 3\n"), Err(Error::Config(_))));
    }

    #[test]
    fn nested_model_fields_parse() {
        let cfg = RunConfig::parse("version = 1\n[model.rmm]\nreduce = \"sum\"\n[model.mixer]\nstacks = 1\n").unwrap();
        assert_eq!(cfg.model.mixer.stacks, 1);
    }
}
