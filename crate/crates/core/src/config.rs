//! Run configuration as one flat JSON object.
//!
//! Every field of the nested model, schedule, optimizer and provider
//! settings appears at the top level, so a config file and command-line
//! overrides share one key space.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::embed::{ProviderConfig, ProviderMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamWConfig, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub schedule: LrSchedule,
    #[serde(flatten)]
    pub optimizer: AdamWConfig,
    #[serde(flatten)]
    pub provider: ProviderConfig,
    pub batch_size: usize,
    pub train_crops: usize,
    pub eval_crops: usize,
    pub max_epochs: u32,
    pub early_stop_patience: u32,
    pub seed: u64,
    /// Smooth-L1 threshold.
    pub beta: f64,
    pub train_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            schedule: LrSchedule::default(),
            optimizer: AdamWConfig::default(),
            provider: ProviderConfig::default(),
            batch_size: 12,
            train_crops: 3,
            eval_crops: 15,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            beta: 1.0,
            train_fraction: 0.8,
        }
    }
}

impl RunConfig {
    /// Small settings that train from scratch on one CPU core in minutes.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig {
                dim: 32,
                vit_depth: 4,
                heads: 4,
                crop_size: 32,
                patch_size: 8,
                n_experts: 4,
                top_k: 3,
                expert_hidden: 64,
                ..ModelConfig::default()
            },
            schedule: LrSchedule {
                base_lr: 1e-3,
                warmup_start_lr: 2e-4,
                warmup_epochs: 3,
                decay_factor: 0.5,
                decay_every_epochs: 8,
            },
            provider: ProviderConfig {
                mode: ProviderMode::FileStore,
                n_tokens: 8,
                ..ProviderConfig::default()
            },
            max_epochs: 24,
            early_stop_patience: 6,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.train_crops == 0 || self.eval_crops == 0 {
            return bad("train_crops and eval_crops must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.early_stop_patience == 0 || self.early_stop_patience > self.max_epochs {
            return bad("early_stop_patience must be in 1..=max_epochs");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must be in (0, 1)");
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies `overrides` (a flat object) on top of `self`. Unknown keys
    /// are rejected so that typos do not pass silently.
    pub fn merged(&self, overrides: &Map<String, Value>) -> Result<Self> {
        let Value::Object(mut base) = self.to_value() else {
            unreachable!("config is an object")
        };
        for (k, v) in overrides {
            if !base.contains_key(k) {
                let mut known: Vec<&String> = base.keys().collect();
                known.sort();
                return Err(Error::Config(format!(
                    "unknown key {k:?}; known keys: {}",
                    known.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
            base.insert(k.clone(), v.clone());
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(base)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, base: &RunConfig) -> Result<Self> {
        base.merged(&read_overrides(path)?)
    }
}

/// Reads a flat JSON config file as an override map, without validating it.
pub fn read_overrides(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(Error::Config(format!("{}: {e}", path.display()))),
    }
}

/// Interprets a command-line value for a key whose current value is
/// `current`. String-valued and unset keys take the text verbatim (`null`
/// clears an unset key); everything else is parsed as JSON, falling back to
/// a string so that the type error names the key.
pub fn parse_override(raw: &str, current: Option<&Value>) -> Value {
    match current {
        Some(Value::String(_)) => Value::String(raw.to_string()),
        Some(Value::Null) if raw != "null" => Value::String(raw.to_string()),
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}
