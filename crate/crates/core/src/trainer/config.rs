//! Training configuration and its TOML file form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::alignment::{LossWeights, ObjectiveOptions, TslReduction};
use crate::flism::Strategy;
use crate::{Error, Result};

pub const CONFIG_VERSION: &str = "goalign-cfg/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Matching settings used when the data directory has no FLISM output yet.
    pub strategy: Strategy,
    pub use_partitions: bool,
    pub tsl_reduction: TslReduction,
    pub stop_grad_targets: bool,
    /// Per-epoch checkpoints to retain; 0 keeps all.
    pub keep_checkpoints: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            strategy: Strategy::Top1,
            use_partitions: true,
            tsl_reduction: TslReduction::Full,
            stop_grad_targets: true,
            keep_checkpoints: 2,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        self.weights.validate()?;
        self.model.vision.validate()
    }

    pub fn objective_options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            weights: self.weights,
            reduction: self.tsl_reduction,
            stop_grad_targets: self.stop_grad_targets,
        }
    }

    /// Parse a config document. Missing keys take their defaults; unknown
    /// keys and a missing or wrong `version` are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match table.remove("version") {
            Some(toml::Value::String(v)) if v == CONFIG_VERSION => {}
            Some(other) => {
                return Err(Error::Version {
                    expected: CONFIG_VERSION.into(),
                    found: other.as_str().map(str::to_string).unwrap_or_else(|| other.to_string()),
                })
            }
            None => {
                return Err(Error::Version {
                    expected: CONFIG_VERSION.into(),
                    found: String::new(),
                })
            }
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        table.insert("version".into(), toml::Value::String(CONFIG_VERSION.into()));
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut c = TrainConfig::default();
        c.weights.tsl = 0.0;
        c.strategy = Strategy::Top3Weighted;
        c.seed = 99;
        let text = c.to_toml().unwrap();
        assert!(text.contains("goalign-cfg/1"));
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = TrainConfig::from_toml(
            "version = \"goalign-cfg/1\"\nepochs = 3\n[weights]\nlocal = 0.0\n[model.vision]\npatch_size = 8\n",
        )
        .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.weights.local, 0.0);
        assert_eq!(c.weights.global, 1.0);
        assert_eq!(c.model.vision.patch_size, 8);
        assert_eq!(c.batch_size, 16);
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(matches!(
            TrainConfig::from_toml("version = \"goalign-cfg/1\"\nepoch = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_toml("version = \"goalign-cfg/2\"\n"),
            Err(Error::Version { .. })
        ));
        assert!(matches!(TrainConfig::from_toml("epochs = 3\n"), Err(Error::Version { .. })));
        assert!(matches!(
            TrainConfig::from_toml("version = \"goalign-cfg/1\"\nbatch_size = 1\n"),
            Err(Error::Config(_))
        ));
    }
}
