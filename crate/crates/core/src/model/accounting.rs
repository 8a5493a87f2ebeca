//! Parameter and FLOP counts of the live (unmasked) network.
//!
//! A conv layer costs `live_in·k·k·live_out` parameters (biases excluded) and
//! `2·h_out·w_out` times that in FLOPs. Linear layers count `in·out + out`
//! parameters and `2·in·out` FLOPs, with input features shrunk in proportion
//! to the live channels of the conv feeding them.

use serde::{Deserialize, Serialize};

use super::{FilterMask, LayerSpec, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: LayerKind,
    pub params: u64,
    pub flops: u64,
    /// Live conv biases (reported, not part of `params`).
    pub bias: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub layers: Vec<LayerCost>,
    pub conv_params: u64,
    pub conv_flops: u64,
    pub linear_params: u64,
    pub linear_flops: u64,
    pub conv_bias: u64,
    pub total_params: u64,
    pub total_flops: u64,
}

impl Accounting {
    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerCost> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv)
    }

    /// Percentage of `baseline` removed, clamped to `[0, 100]`.
    pub fn reduction_pct(baseline: u64, current: u64) -> f64 {
        if baseline == 0 {
            return 0.0;
        }
        let pct = (baseline as f64 - current as f64) / baseline as f64 * 100.0;
        pct.clamp(0.0, 100.0)
    }

    pub fn params_reduction_pct(&self, baseline: &Accounting) -> f64 {
        Self::reduction_pct(baseline.total_params, self.total_params)
    }

    pub fn flops_reduction_pct(&self, baseline: &Accounting) -> f64 {
        Self::reduction_pct(baseline.total_flops, self.total_flops)
    }
}

/// `live_in · k · k · live_out`; `mask_prev = None` means all `n_in` inputs are live.
pub fn layer_params(spec: &LayerSpec, mask_this: &FilterMask, mask_prev: Option<&FilterMask>) -> u64 {
    let LayerSpec::Conv { n_in, k, .. } = *spec else {
        panic!("layer_params is defined for conv layers only");
    };
    let live_in = mask_prev.map_or(n_in, FilterMask::live_count) as u64;
    live_in * (k * k) as u64 * mask_this.live_count() as u64
}

pub fn layer_flops(spec: &LayerSpec, mask_this: &FilterMask, mask_prev: Option<&FilterMask>, h_out: usize, w_out: usize) -> u64 {
    2 * (h_out * w_out) as u64 * layer_params(spec, mask_this, mask_prev)
}

pub fn total_accounting(model: &ModelState) -> Accounting {
    let shapes = model.arch.shapes().expect("model architecture validated at construction");
    let mut layers = Vec::new();
    let mut conv_pos = 0;
    let mut prev_mask: Option<&FilterMask> = None;
    // (live, total) channels feeding the next linear layer
    let mut channel_fraction: Option<(usize, usize)> = None;
    for (i, spec) in model.arch.layers.iter().enumerate() {
        match *spec {
            LayerSpec::Conv { n_out, .. } => {
                let mask = &model.masks[conv_pos];
                let params = layer_params(spec, mask, prev_mask);
                let flops = 2 * (shapes[i].h * shapes[i].w) as u64 * params;
                layers.push(LayerCost {
                    layer: i,
                    kind: LayerKind::Conv,
                    params,
                    flops,
                    bias: mask.live_count() as u64,
                });
                prev_mask = Some(mask);
                channel_fraction = Some((mask.live_count(), n_out));
                conv_pos += 1;
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let live_in = match channel_fraction.take() {
                    Some((live, total)) => in_features / total * live,
                    None => in_features,
                } as u64;
                let out = out_features as u64;
                layers.push(LayerCost {
                    layer: i,
                    kind: LayerKind::Linear,
                    params: live_in * out + out,
                    flops: 2 * live_in * out,
                    bias: 0,
                });
            }
            _ => {}
        }
    }
    let sum = |kind: LayerKind, f: fn(&LayerCost) -> u64| -> u64 { layers.iter().filter(|l| l.kind == kind).map(f).sum() };
    let conv_params = sum(LayerKind::Conv, |l| l.params);
    let conv_flops = sum(LayerKind::Conv, |l| l.flops);
    let linear_params = sum(LayerKind::Linear, |l| l.params);
    let linear_flops = sum(LayerKind::Linear, |l| l.flops);
    let conv_bias = sum(LayerKind::Conv, |l| l.bias);
    Accounting {
        layers,
        conv_params,
        conv_flops,
        linear_params,
        linear_flops,
        conv_bias,
        total_params: conv_params + linear_params,
        total_flops: conv_flops + linear_flops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Shape};

    fn conv(n_in: usize, n_out: usize) -> LayerSpec {
        LayerSpec::conv(n_in, n_out, 3, 1, 1)
    }

    #[test]
    fn canonical_layer_counts() {
        let spec = conv(3, 16);
        let full = FilterMask::full(16);
        assert_eq!(layer_params(&spec, &full, None), 432);
        assert_eq!(layer_flops(&spec, &full, None, 32, 32), 884_736);
        let mut half = FilterMask::full(16);
        for j in 0..8 {
            half.prune(j);
        }
        assert_eq!(layer_params(&spec, &half, None), 216);
    }

    #[test]
    fn pruned_inputs_shrink_next_layer() {
        let mut m1 = FilterMask::full(16);
        for j in [0, 5, 9, 15] {
            m1.prune(j);
        }
        assert_eq!(layer_params(&conv(16, 32), &FilterMask::full(32), Some(&m1)), 3456);
    }

    #[test]
    fn flops_lower_bound_with_single_live_input() {
        let mut prev = FilterMask::full(8);
        for j in 1..8 {
            prev.prune(j);
        }
        let f = layer_flops(&conv(8, 4), &FilterMask::full(4), Some(&prev), 6, 6);
        assert!(f >= 2 * 6 * 6 * 3 * 3);
    }

    #[test]
    fn two_layer_totals() {
        let arch = Architecture {
            input: Shape::new(3, 32, 32),
            layers: vec![conv(3, 16), LayerSpec::Relu, conv(16, 32), LayerSpec::Relu],
        };
        let model = ModelState::zeros(arch).unwrap();
        let acc = total_accounting(&model);
        assert_eq!(acc.conv_params, 5040);
        assert_eq!(acc.conv_flops, 10_321_920);
        assert_eq!(acc.total_params, 5040);
        assert_eq!(acc.conv_bias, 48);
    }

    #[test]
    fn linear_inputs_follow_last_conv() {
        let mut model = ModelState::zeros(Architecture::toy4(4)).unwrap();
        let full = total_accounting(&model);
        assert_eq!(full.linear_params, 64 * 4 + 4);
        let mut masks = model.masks.clone();
        masks[3].prune(0);
        masks[3].prune(1);
        model.set_masks(masks).unwrap();
        let acc = total_accounting(&model);
        assert_eq!(acc.linear_params, 62 * 4 + 4);
        assert_eq!(acc.linear_flops, 2 * 62 * 4);
        assert!(acc.total_params < full.total_params);
    }

    #[test]
    fn reduction_pct_clamps() {
        assert_eq!(Accounting::reduction_pct(100, 25), 75.0);
        assert_eq!(Accounting::reduction_pct(100, 120), 0.0);
        assert_eq!(Accounting::reduction_pct(0, 0), 0.0);
    }
}
