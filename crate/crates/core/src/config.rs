//! Run configuration: a single TOML file drives every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::metrics::MiaConfig;
use crate::model::BackboneConfig;
use crate::training::TrainConfig;

/// Sliding-window plan geometry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub total_classes: usize,
    pub window: usize,
    pub stride: usize,
    pub num_tasks: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            total_classes: 24,
            window: 6,
            stride: 2,
            num_tasks: 6,
        }
    }
}

/// Hyperparameters of a plain training phase (pretraining, oracles).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

/// Everything a run needs; round-trips losslessly through the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Replay-buffer fraction of the full retain set, in (0, 1].
    pub buffer_ratio: f64,
    pub dataset: SyntheticSpec,
    pub model: BackboneConfig,
    pub adapters: AdapterConfig,
    pub train: TrainConfig,
    pub plan: PlanConfig,
    pub pretrain: PhaseConfig,
    pub oracle: PhaseConfig,
    pub mia: MiaConfig,
    /// Output directory; `--out` overrides, else the output root plus the
    /// config stem.
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            buffer_ratio: 0.1,
            dataset: SyntheticSpec::default(),
            model: BackboneConfig::default(),
            adapters: AdapterConfig::default(),
            train: TrainConfig::default(),
            plan: PlanConfig::default(),
            pretrain: PhaseConfig::default(),
            oracle: PhaseConfig::default(),
            mia: MiaConfig::default(),
            output: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.buffer_ratio > 0.0 && self.buffer_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "buffer_ratio must be in (0, 1], got {}",
                self.buffer_ratio
            )));
        }
        if self.dataset.seq_len != self.model.seq_len
            || self.dataset.input_dim != self.model.input_dim
        {
            return Err(Error::Config(format!(
                "dataset token shape {}x{} does not match model {}x{}",
                self.dataset.seq_len,
                self.dataset.input_dim,
                self.model.seq_len,
                self.model.input_dim
            )));
        }
        if self.model.num_class_slots < self.dataset.num_classes {
            return Err(Error::Config(format!(
                "num_class_slots {} < dataset classes {}",
                self.model.num_class_slots, self.dataset.num_classes
            )));
        }
        if self.plan.window <= self.plan.stride {
            return Err(Error::Config(format!(
                "plan window {} must exceed stride {}",
                self.plan.window, self.plan.stride
            )));
        }
        if self.pretrain.batch_size == 0 || self.oracle.batch_size == 0 {
            return Err(Error::Config("phase batch sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.train.weights.lambda_esc = 5.5;
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn mismatched_token_shape_rejected() {
        let mut cfg = RunConfig::default();
        cfg.dataset.input_dim = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
