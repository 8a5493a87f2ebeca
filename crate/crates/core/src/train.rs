//! Mini-batch training and top-1 evaluation.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{augment, permutation, Augmentation, Dataset};
use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelState};
use crate::ops::loss::{argmax, softmax_cross_entropy};
use crate::optim::{sgd_step, SgdConfig};
use crate::rng::{RngState, Stream};

/// Momentum buffers, one per parameter buffer of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(pub Vec<LayerParams>);

impl Velocity {
    pub fn zeros(model: &ModelState) -> Self {
        Velocity(model.zeros_like_params())
    }

    /// Zeroes the buffers of pruned filters.
    pub fn apply_masks(&mut self, model: &ModelState) {
        for (ci, layer) in model.conv_indices().into_iter().enumerate() {
            if let LayerParams::Conv(v) = &mut self.0[layer] {
                for j in (0..model.masks[ci].len()).filter(|&j| !model.masks[ci].is_live(j)) {
                    v.zero_filter(j);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub sgd: SgdConfig,
    #[serde(default)]
    pub augmentation: Augmentation,
}

/// Trains over `epochs`, using the lr scheduled for each epoch index and
/// per-epoch shuffle/augmentation streams. Returns mean loss per epoch.
pub fn train_epochs(
    model: &mut ModelState,
    velocity: &mut Velocity,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &RngState,
    epochs: Range<usize>,
) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut losses = Vec::with_capacity(epochs.len());
    for epoch in epochs {
        let lr = cfg.sgd.lr_at_epoch(epoch)?;
        let order = permutation(data.len(), &mut rng.stream(Stream::Shuffle, epoch as u32));
        let mut aug_rng = rng.stream(Stream::Augment, epoch as u32);
        let mut total = 0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, labels) = data.batch(chunk);
            augment(&mut x, &cfg.augmentation, &mut aug_rng);
            let trace = model.forward_train(&x)?;
            let (loss, grad) = softmax_cross_entropy(&trace.logits, &labels)?;
            total += loss as f64 * chunk.len() as f64;
            let grads = model.backward(&trace, &grad)?;
            for ((p, g), v) in model.params.iter_mut().zip(&grads).zip(velocity.0.iter_mut()) {
                for ((pw, gw), vw) in p.buffers_mut().into_iter().zip(g.buffers()).zip(v.buffers_mut()) {
                    sgd_step(pw, gw, vw, &cfg.sgd, lr);
                }
            }
            model.apply_masks();
        }
        model.epoch = epoch + 1;
        losses.push((total / data.len() as f64) as f32);
    }
    Ok(losses)
}

/// Percentage of test samples whose argmax logit equals the label.
pub fn evaluate_top1(model: &ModelState, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, labels) = data.batch(chunk);
        let logits = model.logits(&x)?;
        correct += labels
            .iter()
            .enumerate()
            .filter(|&(n, &l)| argmax(logits.sample(n)) == l)
            .count();
    }
    Ok(correct as f64 * 100.0 / data.len() as f64)
}
