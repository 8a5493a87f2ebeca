//! Layer-aware thresholding of attention scores into filter masks.
//!
//! Each conv layer's threshold is the global threshold scaled by the layer's
//! share of the remaining conv parameters (or FLOPs). A live filter whose
//! score is `<=` its layer threshold is pruned, except the highest-scoring
//! filter of each layer, which is always kept.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionSummary;
use crate::error::{Error, Result};
use crate::model::{total_accounting, Accounting, FilterMask, LayerParams, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneGoal {
    Params,
    Flops,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub thresholds: Vec<f64>,
    pub pruned: Vec<Vec<usize>>,
    pub masks: Vec<FilterMask>,
    pub before: Accounting,
    pub after: Accounting,
}

impl PruneOutcome {
    pub fn pruned_count(&self) -> usize {
        self.pruned.iter().map(Vec::len).sum()
    }
}

pub fn layer_thresholds(global_t: f64, accounting: &Accounting, goal: PruneGoal) -> Result<Vec<f64>> {
    if !(global_t >= 0.0) {
        return Err(Error::Accounting(format!("global threshold must be >= 0 (got {global_t})")));
    }
    let (values, total): (Vec<u64>, u64) = match goal {
        PruneGoal::Params => (accounting.conv_layers().map(|l| l.params).collect(), accounting.conv_params),
        PruneGoal::Flops => (accounting.conv_layers().map(|l| l.flops).collect(), accounting.conv_flops),
    };
    if total == 0 {
        return Err(Error::Accounting("model has no remaining conv parameters".into()));
    }
    Ok(values.into_iter().map(|v| global_t * (v as f64 / total as f64)).collect())
}

/// Index of the highest score among live filters; lowest index on ties.
fn guarded_filter(scores: &[f64], mask: &FilterMask) -> Option<usize> {
    mask.live_indices()
        .into_iter()
        .fold(None, |best: Option<usize>, j| match best {
            Some(b) if scores[b] >= scores[j] => Some(b),
            _ => Some(j),
        })
}

/// Masks produced by thresholding `summary` at `global_t`. Does not modify `model`.
pub fn prune_round(model: &ModelState, summary: &AttentionSummary, global_t: f64, goal: PruneGoal) -> Result<PruneOutcome> {
    if summary.scores.len() != model.num_conv() {
        return Err(Error::shape(&[model.num_conv()], &[summary.scores.len()]));
    }
    let before = total_accounting(model);
    let thresholds = layer_thresholds(global_t, &before, goal)?;
    let mut masks = model.masks.clone();
    let mut pruned = Vec::with_capacity(masks.len());
    for ((mask, scores), &t) in masks.iter_mut().zip(&summary.scores).zip(&thresholds) {
        if scores.len() != mask.len() {
            return Err(Error::shape(&[mask.len()], &[scores.len()]));
        }
        let keep = guarded_filter(scores, mask);
        let layer_pruned: Vec<usize> = mask
            .live_indices()
            .into_iter()
            .filter(|&j| Some(j) != keep && scores[j] <= t)
            .collect();
        for &j in &layer_pruned {
            mask.prune(j);
        }
        pruned.push(layer_pruned);
    }
    let mut next = model.clone();
    next.set_masks(masks.clone())?;
    let after = total_accounting(&next);
    Ok(PruneOutcome {
        thresholds,
        pruned,
        masks,
        before,
        after,
    })
}

/// Σ|w| over each filter (weights only), per conv layer.
pub fn l1_filter_scores(model: &ModelState) -> Vec<Vec<f64>> {
    model
        .params
        .iter()
        .filter_map(|p| match p {
            LayerParams::Conv(c) => Some(
                (0..c.n_out)
                    .map(|o| c.filter(o).iter().map(|&v| (v as f64).abs()).sum())
                    .collect(),
            ),
            _ => None,
        })
        .collect()
}

/// Prunes, in every conv layer, the lowest-scoring `round(live·rate)` live
/// filters (at least one while more than one is live), never the last one.
pub fn prune_fraction(model: &ModelState, scores: &[Vec<f64>], rate: f64) -> Result<Vec<FilterMask>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("prune rate must be within [0, 1] (got {rate})")));
    }
    if scores.len() != model.num_conv() {
        return Err(Error::shape(&[model.num_conv()], &[scores.len()]));
    }
    let mut masks = model.masks.clone();
    for (mask, s) in masks.iter_mut().zip(scores) {
        let mut live = mask.live_indices();
        let n = live.len();
        if n <= 1 || rate == 0.0 {
            continue;
        }
        let count = ((n as f64 * rate).round() as usize).max(1).min(n - 1);
        live.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
        for &j in &live[..count] {
            mask.prune(j);
        }
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, LayerSpec, Shape};

    fn two_layer() -> ModelState {
        let arch = Architecture {
            input: Shape::new(3, 32, 32),
            layers: vec![
                LayerSpec::conv(3, 16, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::conv(16, 32, 3, 1, 1),
                LayerSpec::Relu,
            ],
        };
        ModelState::zeros(arch).unwrap()
    }

    #[test]
    fn params_share_threshold() {
        let acc = Accounting {
            layers: vec![
                crate::model::LayerCost {
                    layer: 0,
                    kind: crate::model::LayerKind::Conv,
                    params: 432,
                    flops: 0,
                    bias: 0,
                },
                crate::model::LayerCost {
                    layer: 2,
                    kind: crate::model::LayerKind::Conv,
                    params: 3888,
                    flops: 0,
                    bias: 0,
                },
            ],
            conv_params: 4320,
            conv_flops: 0,
            linear_params: 0,
            linear_flops: 0,
            conv_bias: 0,
            total_params: 4320,
            total_flops: 0,
        };
        let t = layer_thresholds(0.02, &acc, PruneGoal::Params).unwrap();
        assert!((t[0] - 0.002).abs() < 1e-12);
        assert!(layer_thresholds(0.02, &acc, PruneGoal::Flops).is_err());
    }

    #[test]
    fn flops_shares_for_two_layer_model() {
        let acc = total_accounting(&two_layer());
        let t = layer_thresholds(0.01, &acc, PruneGoal::Flops).unwrap();
        let t1 = 0.01 * 884_736.0 / 10_321_920.0;
        let t2 = 0.01 * 9_437_184.0 / 10_321_920.0;
        assert!((t[0] - t1).abs() < 1e-15 && (t[0] - 0.000857).abs() < 1e-6);
        assert!((t[1] - t2).abs() < 1e-15 && (t[1] - 0.009143).abs() < 1e-6);
        // equal spatial extents make params and flops shares coincide
        let tp = layer_thresholds(0.01, &acc, PruneGoal::Params).unwrap();
        assert!((tp[0] - t[0]).abs() < 1e-15);
        assert_eq!(layer_thresholds(0.0, &acc, PruneGoal::Params).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn threshold_compare_is_inclusive_and_guarded() {
        let arch = Architecture {
            input: Shape::new(1, 4, 4),
            layers: vec![LayerSpec::conv(1, 3, 3, 1, 1), LayerSpec::Relu],
        };
        let model = ModelState::zeros(arch).unwrap();
        // single conv layer: its share is 1, so T^i = T
        let summary = AttentionSummary {
            scores: vec![vec![0.001, 0.4, 0.0005]],
            sample_count: 1,
        };
        let out = prune_round(&model, &summary, 0.002, PruneGoal::Params).unwrap();
        assert_eq!(out.pruned, vec![vec![0, 2]]);
        assert_eq!(out.masks[0].bits(), &[false, true, false]);

        let out = prune_round(&model, &summary, 0.001, PruneGoal::Params).unwrap();
        assert_eq!(out.pruned, vec![vec![0, 2]]);

        let out = prune_round(&model, &summary, 10.0, PruneGoal::Params).unwrap();
        assert_eq!(out.masks[0].live_count(), 1);
        assert!(out.masks[0].is_live(1));
    }

    #[test]
    fn zero_threshold_prunes_only_dead_filters() {
        let arch = Architecture {
            input: Shape::new(1, 4, 4),
            layers: vec![LayerSpec::conv(1, 3, 3, 1, 1), LayerSpec::Relu],
        };
        let model = ModelState::zeros(arch).unwrap();
        let alive = AttentionSummary {
            scores: vec![vec![0.3, 0.1, 0.2]],
            sample_count: 1,
        };
        assert_eq!(prune_round(&model, &alive, 0.0, PruneGoal::Params).unwrap().pruned_count(), 0);
        let one_dead = AttentionSummary {
            scores: vec![vec![0.3, 0.0, 0.2]],
            sample_count: 1,
        };
        assert_eq!(
            prune_round(&model, &one_dead, 0.0, PruneGoal::Params).unwrap().pruned,
            vec![vec![1]]
        );
    }

    #[test]
    fn fraction_pruning_keeps_one() {
        let arch = Architecture {
            input: Shape::new(1, 4, 4),
            layers: vec![LayerSpec::conv(1, 4, 3, 1, 1), LayerSpec::Relu],
        };
        let model = ModelState::zeros(arch).unwrap();
        let scores = vec![vec![0.4, 0.1, 0.3, 0.2]];
        let m = prune_fraction(&model, &scores, 0.5).unwrap();
        assert_eq!(m[0].bits(), &[true, false, true, false]);
        let m = prune_fraction(&model, &scores, 1.0).unwrap();
        assert_eq!(m[0].live_indices(), vec![0]);
        let m = prune_fraction(&model, &scores, 0.05).unwrap();
        assert_eq!(m[0].live_count(), 3);
    }
}
