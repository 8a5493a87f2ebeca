//! Versioned JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::AttentionConfig;
use crate::controller::{ControllerConfig, Policy};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::optim::SgdConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// `toy4`, `toy2` or `vgg_tiny`.
    pub architecture: String,
    pub dataset: DatasetSpec,
    pub total_epochs: usize,
    #[serde(default = "default_rewind_fraction")]
    pub rewind_fraction: f64,
    #[serde(default)]
    pub rewind_weights: bool,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub policy: Policy,
    #[serde(default)]
    pub attention: AttentionConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    /// Filters removed per round by the fixed-rate ablations, in percent of live filters.
    #[serde(default)]
    pub prune_rate_pct: Option<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_rewind_fraction() -> f64 {
    0.6
}

const REQUIRED: &[&str] = &[
    "schema_version",
    "seed",
    "architecture",
    "dataset",
    "total_epochs",
    "batch_size",
    "sgd",
    "policy",
    "policy.kind",
    "policy.target",
];

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |v, k| v.get(k))
}

impl RunConfig {
    /// Toy experiment: 4-conv CNN on synthetic blobs, 30 epochs, 1% accuracy-loss target.
    ///
    /// The blob dataset is the same for every seed; the seed drives
    /// initialization, shuffling and calibration sampling.
    pub fn toy(seed: u64) -> Self {
        let mut dataset = DatasetSpec::toy_blobs(42);
        dataset.test_size = 1024;
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed,
            architecture: "toy4".into(),
            dataset,
            total_epochs: 30,
            rewind_fraction: 0.6,
            rewind_weights: false,
            batch_size: 32,
            sgd: SgdConfig {
                lr_schedule: vec![(0, 0.01), (2, 0.05), (15, 0.005), (23, 0.0005)],
                momentum: 0.9,
                weight_decay: 5e-4,
                nesterov: true,
            },
            policy: Policy::accuracy(1.0),
            attention: AttentionConfig {
                calibration_batches: 8,
                ..AttentionConfig::default()
            },
            controller: ControllerConfig {
                initial_lambda: 0.05,
                ..ControllerConfig::default()
            },
            prune_rate_pct: None,
            output_dir: None,
        }
    }

    /// Parses and validates; missing or invalid keys are reported together.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let missing: Vec<String> = REQUIRED
            .iter()
            .filter(|k| lookup(&value, k).is_none())
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation { keys: missing });
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            bad.push("schema_version");
        }
        if self.build_architecture().is_err() {
            bad.push("architecture");
        }
        if self.dataset.validate().is_err() {
            bad.push("dataset");
        }
        if self.total_epochs < 2 {
            bad.push("total_epochs");
        }
        if !(self.rewind_fraction > 0.0 && self.rewind_fraction < 1.0) {
            bad.push("rewind_fraction");
        }
        if self.batch_size == 0 {
            bad.push("batch_size");
        }
        if self.sgd.validate().is_err() {
            bad.push("sgd");
        }
        if self.policy.validate().is_err() {
            bad.push("policy.target");
        }
        if self.attention.validate().is_err() {
            bad.push("attention");
        }
        if self.controller.validate().is_err() {
            bad.push("controller");
        }
        if let Some(rate) = self.prune_rate_pct {
            if !(0.0..=100.0).contains(&rate) {
                bad.push("prune_rate_pct");
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation {
                keys: bad.into_iter().map(String::from).collect(),
            })
        }
    }

    pub fn build_architecture(&self) -> Result<Architecture> {
        Architecture::named(&self.architecture, self.dataset.image, self.dataset.classes)
    }

    /// Epoch of the weight snapshot used for rewinding.
    pub fn rewind_epoch(&self) -> usize {
        ((self.rewind_fraction * self.total_epochs as f64).round() as usize).clamp(1, self.total_epochs - 1)
    }
}
