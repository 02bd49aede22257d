use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use mammo_core::data::DatasetConfig;
use mammo_core::enhance::EnhanceConfig;
use mammo_core::ensemble::EnsembleConfig;
use mammo_core::models::{ModelConfig, ModelKind};
use mammo_core::train::TrainConfig;
use mammo_core::xai::XaiConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_side: usize,
    /// Per-kind field overrides on top of the kind's defaults, keyed by kind
    /// name, e.g. `[model.overrides.vit] depth = 2`.
    pub overrides: BTreeMap<String, toml::Table>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            input_side: 64,
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; when set it replaces the dataset, training and model
    /// seeds.
    pub seed: Option<u64>,
    pub dataset: DatasetConfig,
    pub enhance: EnhanceConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub xai: XaiConfig,
    pub ensemble: EnsembleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: Some(42),
            dataset: DatasetConfig::default(),
            enhance: EnhanceConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            xai: XaiConfig::default(),
            ensemble: EnsembleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.resolved()
    }

    /// Applies the global seed and validates every section.
    pub fn resolved(mut self) -> Result<Self> {
        if let Some(s) = self.seed {
            self.dataset.seed = s;
            self.train.seed = s;
        }
        self.dataset.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.xai.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.ensemble.validate().map_err(|e| ConfigError(e.to_string()))?;
        for key in self.model.overrides.keys() {
            let kind: ModelKind = key.parse().map_err(ConfigError)?;
            self.model_config(kind)?;
        }
        Ok(self)
    }

    /// Defaults for `kind` at the configured input side and seed, with the
    /// kind's overrides applied.
    pub fn model_config(&self, kind: ModelKind) -> Result<ModelConfig> {
        let base = ModelConfig {
            input_side: self.model.input_side,
            seed: self.train.seed,
            ..ModelConfig::default_for(kind)
        };
        let mut table = toml::Table::try_from(&base)?;
        for (key, value) in &self.model.overrides {
            if key.parse::<ModelKind>().map_err(ConfigError)? == kind {
                for (k, v) in value {
                    if !table.contains_key(k) {
                        return Err(ConfigError(format!("model.overrides.{key}: unknown field `{k}`")).into());
                    }
                    table.insert(k.clone(), v.clone());
                }
            }
        }
        let cfg: ModelConfig = table
            .try_into()
            .map_err(|e| ConfigError(format!("model.overrides for {kind}: {e}")))?;
        cfg.validate(kind).map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Invalid configuration or arguments; exits with the usage code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);
