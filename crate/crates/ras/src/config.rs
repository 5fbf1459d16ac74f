//! Run configuration: network, training and evaluation settings in one JSON
//! document.
//!
//! Omitted fields take the preset of the chosen backbone, so
//! `{"network": {"backbone": "vgg16"}}` is a complete config.
//!
//! ```json
//! {
//!   "network": { "backbone": "toy", "attention_enabled": true },
//!   "train": { "learning_rate": 1e-5, "max_iterations": 2000, "seed": 0 },
//!   "precision": "f64",
//!   "eval": { "beta2": 0.3, "per_image": false }
//! }
//! ```

use std::path::Path;

use ras_core::metrics::{CurveMode, DEFAULT_BETA2};
use ras_core::network::Backbone;
use ras_core::training::TrainConfig;
use ras_core::NetworkSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub beta2: f64,
    /// Average per-image curves instead of summing counts over the dataset.
    pub per_image: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            beta2: DEFAULT_BETA2,
            per_image: false,
        }
    }
}

impl EvalOptions {
    pub fn mode(&self) -> CurveMode {
        if self.per_image {
            CurveMode::PerImage
        } else {
            CurveMode::Aggregate
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub precision: Precision,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn preset(backbone: Backbone) -> Self {
        let (network, train) = match backbone {
            Backbone::Vgg16 => (NetworkSpec::vgg16(), TrainConfig::vgg16()),
            Backbone::Toy => (NetworkSpec::toy(), TrainConfig::toy()),
        };
        RunConfig {
            network,
            train,
            precision: Precision::F64,
            eval: EvalOptions::default(),
        }
    }

    /// Parses a config, filling omitted fields from the backbone's preset.
    pub fn from_json(text: &str) -> Result<Self> {
        let given: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        let Value::Object(given) = given else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let backbone = match given.get("network").and_then(|n| n.get("backbone")) {
            Some(b) => serde_json::from_value(b.clone()).map_err(|e| Error::Config(format!("network.backbone: {e}")))?,
            None => Backbone::Toy,
        };
        let mut merged = serde_json::to_value(RunConfig::preset(backbone)).expect("config serializes");
        for (key, value) in given {
            let Some(slot) = merged.get_mut(&key) else {
                return Err(Error::Config(format!("unknown config section {key:?}")));
            };
            match (slot, value) {
                (Value::Object(base), Value::Object(over)) => {
                    for (k, v) in over {
                        if !base.contains_key(&k) {
                            return Err(Error::Config(format!("unknown field {key}.{k}")));
                        }
                        base.insert(k, v);
                    }
                }
                (slot, value) => *slot = value,
            }
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks every section against its own invariants.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if !(self.eval.beta2 > 0.0 && self.eval.beta2.is_finite()) {
            return Err(Error::Config(format!("eval.beta2 must be positive, got {}", self.eval.beta2)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
