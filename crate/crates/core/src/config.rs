//! Run configuration: one TOML file with `model`, `train`, `infer`, `synth`
//! and `paths` tables. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::synthgen::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory read by training and written by synthesis.
    pub dataset: PathBuf,
    /// Run directory holding `train.log`, the lock and checkpoints.
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/synth"),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub synth: SynthConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Parses and validates. Every table must be present.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("schema: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.synth.scene.validate()?;
        if self.synth.num_videos == 0 {
            return Err(Error::Config("synth.num_videos must be positive".into()));
        }
        Ok(())
    }

    /// Applies a global seed to generation, initialization, sampling and
    /// inference.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.infer.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn empty_config_is_a_schema_error() {
        let err = RunConfig::from_toml("").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.starts_with("schema")), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml();
        text = text.replacen("[infer]\n", "[infer]\nbogus = 1\n", 1);
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn semantic_violations_are_rejected_after_parsing() {
        let mut c = RunConfig::default();
        c.infer.overlap = c.infer.clip_len;
        assert!(RunConfig::from_toml(&c.to_toml()).is_err());
    }

    #[test]
    fn seed_reaches_every_section() {
        let c = RunConfig::default().with_seed(42);
        assert_eq!((c.synth.seed, c.train.seed, c.infer.seed), (42, 42, 42));
    }
}
