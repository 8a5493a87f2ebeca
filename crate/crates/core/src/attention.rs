//! Per-filter attention scores from post-ReLU feature maps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{permutation, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng::{RngState, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionFunction {
    Mean,
    Max,
    Sum,
}

impl AttentionFunction {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionFunction::Mean => "mean",
            AttentionFunction::Max => "max",
            AttentionFunction::Sum => "sum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub function: AttentionFunction,
    pub p: f64,
    pub calibration_batches: usize,
    pub calibration_seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    32
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            function: AttentionFunction::Mean,
            p: 1.0,
            calibration_batches: 10,
            calibration_seed: 0,
            batch_size: default_batch(),
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0) {
            return Err(Error::Config(format!("attention p must be >= 1 (got {})", self.p)));
        }
        if self.calibration_batches == 0 || self.batch_size == 0 {
            return Err(Error::Config("calibration_batches and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[inline]
fn pow_abs(v: f32, p: f64) -> f64 {
    let a = (v as f64).abs();
    if p == 1.0 {
        a
    } else {
        a.powf(p)
    }
}

/// Reduces one `h×w` activation map to a scalar: mean, max or sum of `|a|^p`.
pub fn attention_of_map(map: &[f32], function: AttentionFunction, p: f64) -> f64 {
    match function {
        AttentionFunction::Mean => map.iter().map(|&v| pow_abs(v, p)).sum::<f64>() / map.len() as f64,
        AttentionFunction::Sum => map.iter().map(|&v| pow_abs(v, p)).sum(),
        AttentionFunction::Max => map.iter().map(|&v| pow_abs(v, p)).fold(0.0, f64::max),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    /// `scores[layer][filter]` for each conv layer.
    pub scores: Vec<Vec<f64>>,
    pub sample_count: usize,
}

impl AttentionSummary {
    /// Rows `layer_index,filter_index,score`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer_index,filter_index,score\n");
        for (l, layer) in self.scores.iter().enumerate() {
            for (f, v) in layer.iter().enumerate() {
                writeln!(s, "{l},{f},{v}").expect("write to string");
            }
        }
        s
    }
}

/// Mean per-sample attention of every conv filter over the calibration samples.
pub fn collect_attention(model: &ModelState, data: &Dataset, cfg: &AttentionConfig) -> Result<AttentionSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty calibration dataset".into()));
    }
    let rng = RngState::new(cfg.calibration_seed);
    let mut order = permutation(data.len(), &mut rng.stream(Stream::Calibration, 0));
    order.truncate(cfg.calibration_batches * cfg.batch_size);

    let mut sums: Vec<Vec<f64>> = model.masks.iter().map(|m| vec![0.0; m.len()]).collect();
    for chunk in order.chunks(cfg.batch_size) {
        let (x, _) = data.batch(chunk);
        let acts = model.masked_forward(&x, true)?.activations.expect("capture requested");
        for (layer, act) in acts.iter().enumerate() {
            for n in 0..chunk.len() {
                for (f, sum) in sums[layer].iter_mut().enumerate() {
                    *sum += attention_of_map(act.plane(n, f), cfg.function, cfg.p);
                }
            }
        }
    }
    let count = order.len();
    let scores = sums
        .into_iter()
        .zip(&model.masks)
        .map(|(layer, mask)| {
            layer
                .into_iter()
                .enumerate()
                .map(|(f, s)| if mask.is_live(f) { s / count as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(AttentionSummary {
        scores,
        sample_count: count,
    })
}
