//! Layered CNN definitions, per-filter masks and masked execution.

mod accounting;
mod checkpoint;
mod compact;
mod forward;

pub use accounting::{layer_flops, layer_params, total_accounting, Accounting, LayerCost, LayerKind};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use compact::export_compact;
pub use forward::{ForwardOutput, Gradients, Trace};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv::output_extent;
use crate::ops::pool::pooled_extent;
use crate::ops::{ConvWeights, LinearWeights};
use crate::rng::{RngState, Stream};

/// Per-sample feature shape `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        n_in: usize,
        n_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool {
        window: usize,
        stride: usize,
    },
    #[serde(rename = "avgpool")]
    AvgPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Adds the output of layer `from` to this layer's input.
    Residual {
        from: usize,
    },
}

impl LayerSpec {
    pub fn conv(n_in: usize, n_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv {
            n_in,
            n_out,
            k,
            stride,
            pad,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Output shape of every layer, validating shape compatibility along the way.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut cur = self.input;
        if cur.is_empty() {
            return Err(Error::InvalidShape(format!("empty input shape {cur:?}")));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::InvalidShape(format!("layer {i}: {msg}"));
            cur = match *layer {
                LayerSpec::Conv {
                    n_in,
                    n_out,
                    k,
                    stride,
                    pad,
                } => {
                    if n_in != cur.c {
                        return Err(bad(format!("conv expects {n_in} input channels, got {}", cur.c)));
                    }
                    if n_out == 0 || k == 0 || stride == 0 {
                        return Err(bad("conv needs n_out, k, stride >= 1".into()));
                    }
                    let h = output_extent(cur.h, k, stride, pad);
                    let w = output_extent(cur.w, k, stride, pad);
                    match (h, w) {
                        (Some(h), Some(w)) => Shape::new(n_out, h, w),
                        _ => {
                            return Err(bad(format!(
                                "conv k={k} s={stride} p={pad} does not tile {}x{}",
                                cur.h, cur.w
                            )))
                        }
                    }
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                    match (pooled_extent(cur.h, window, stride), pooled_extent(cur.w, window, stride)) {
                        (Some(h), Some(w)) => Shape::new(cur.c, h, w),
                        _ => return Err(bad(format!("pool {window}/{stride} does not fit {}x{}", cur.h, cur.w))),
                    }
                }
                LayerSpec::Flatten => Shape::new(cur.len(), 1, 1),
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    if in_features != cur.len() {
                        return Err(bad(format!("linear expects {in_features} features, got {}", cur.len())));
                    }
                    if out_features == 0 {
                        return Err(bad("linear needs out_features >= 1".into()));
                    }
                    Shape::new(out_features, 1, 1)
                }
                LayerSpec::Residual { from } => {
                    if from + 1 >= i {
                        return Err(bad(format!("residual source {from} must precede layer {}", i - 1)));
                    }
                    if out[from] != cur {
                        return Err(bad(format!("residual shapes differ: {:?} vs {cur:?}", out[from])));
                    }
                    cur
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(self.shapes()?.last().copied().unwrap_or(self.input))
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Layer indices of convolution layers, in order.
    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_conv())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_sequential(&self) -> bool {
        !self.layers.iter().any(|l| matches!(l, LayerSpec::Residual { .. }))
    }

    /// Conv/ReLU stack with a pooled linear head. `widths` are the conv output channels;
    /// `pool_after` lists conv positions followed by 2×2 max pooling.
    pub fn cnn(input: Shape, widths: &[usize], pool_after: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = input.c;
        let mut h = input.h;
        let mut w = input.w;
        for (pos, &width) in widths.iter().enumerate() {
            layers.push(LayerSpec::conv(c, width, 3, 1, 1));
            layers.push(LayerSpec::Relu);
            c = width;
            if pool_after.contains(&pos) {
                layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
                h /= 2;
                w /= 2;
            }
        }
        if h > 1 || w > 1 {
            if h != w {
                return Err(Error::InvalidShape(format!("global pooling needs a square map, got {h}x{w}")));
            }
            layers.push(LayerSpec::AvgPool { window: h, stride: h });
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear {
            in_features: c,
            out_features: classes,
        });
        let arch = Architecture { input, layers };
        arch.validate()?;
        Ok(arch)
    }

    /// Four 3×3 conv layers (16-32-48-64, ~47k parameters) on 3×8×8 inputs.
    pub fn toy4(classes: usize) -> Self {
        Self::cnn(Shape::new(3, 8, 8), &[16, 32, 48, 64], &[0, 1], classes).expect("toy4 is well-formed")
    }

    /// Resolves a named architecture id.
    pub fn named(id: &str, input: Shape, classes: usize) -> Result<Self> {
        match id {
            "toy4" => Self::cnn(input, &[16, 32, 48, 64], &[0, 1], classes),
            "toy2" => Self::cnn(input, &[8, 16], &[0], classes),
            "vgg_tiny" => Self::cnn(input, &[16, 16, 32, 32, 64, 64], &[1, 3], classes),
            other => Err(Error::Config(format!("unknown architecture id {other:?}"))),
        }
    }
}

/// One bit per output filter of a conv layer; `true` keeps the filter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterMask {
    bits: Vec<bool>,
}

impl FilterMask {
    pub fn full(n: usize) -> Self {
        FilterMask { bits: vec![true; n] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        FilterMask { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_live(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn live_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn live_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&j| self.bits[j]).collect()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn prune(&mut self, j: usize) {
        self.bits[j] = false;
    }

    /// True when every filter pruned in `earlier` is also pruned here.
    pub fn is_subset_of(&self, earlier: &FilterMask) -> bool {
        self.bits.len() == earlier.bits.len() && self.bits.iter().zip(&earlier.bits).all(|(&now, &before)| !now || before)
    }

    /// Compact text form, `1` for live and `0` for pruned.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Data(format!("invalid mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(FilterMask::from_bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    None,
    Conv(ConvWeights),
    Linear(LinearWeights),
}

impl LayerParams {
    pub fn buffers_mut(&mut self) -> Vec<&mut [f32]> {
        match self {
            LayerParams::None => Vec::new(),
            LayerParams::Conv(c) => {
                let mut v: Vec<&mut [f32]> = vec![c.filters.as_mut_slice()];
                if let Some(b) = c.bias.as_mut() {
                    v.push(b.as_mut_slice());
                }
                v
            }
            LayerParams::Linear(l) => vec![l.weight.as_mut_slice(), l.bias.as_mut_slice()],
        }
    }

    pub fn buffers(&self) -> Vec<&[f32]> {
        match self {
            LayerParams::None => Vec::new(),
            LayerParams::Conv(c) => {
                let mut v: Vec<&[f32]> = vec![c.filters.as_slice()];
                if let Some(b) = c.bias.as_ref() {
                    v.push(b.as_slice());
                }
                v
            }
            LayerParams::Linear(l) => vec![l.weight.as_slice(), l.bias.as_slice()],
        }
    }

    fn zeros_like(&self) -> LayerParams {
        match self {
            LayerParams::None => LayerParams::None,
            LayerParams::Conv(c) => LayerParams::Conv(ConvWeights::zeros(c.n_out, c.n_in, c.k, c.bias.is_some())),
            LayerParams::Linear(l) => LayerParams::Linear(LinearWeights::zeros(l.in_features, l.out_features)),
        }
    }
}

/// A network: architecture, weights, filter masks and training position.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: Architecture,
    pub params: Vec<LayerParams>,
    /// One mask per conv layer, in layer order.
    pub masks: Vec<FilterMask>,
    pub epoch: usize,
    pub round: usize,
}

impl ModelState {
    /// Zero weights, full masks.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::with_capacity(arch.layers.len());
        let mut masks = Vec::new();
        for layer in &arch.layers {
            params.push(match *layer {
                LayerSpec::Conv { n_in, n_out, k, .. } => {
                    masks.push(FilterMask::full(n_out));
                    LayerParams::Conv(ConvWeights::zeros(n_out, n_in, k, true))
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => LayerParams::Linear(LinearWeights::zeros(in_features, out_features)),
                _ => LayerParams::None,
            });
        }
        Ok(ModelState {
            arch,
            params,
            masks,
            epoch: 0,
            round: 0,
        })
    }

    /// He-normal weights drawn from the init stream, zero biases.
    pub fn init(arch: Architecture, rng: &RngState) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut r = rng.stream(Stream::Init, 0);
        for p in &mut model.params {
            let (fan_in, buf) = match p {
                LayerParams::Conv(c) => (c.filter_len(), &mut c.filters),
                LayerParams::Linear(l) => (l.in_features, &mut l.weight),
                LayerParams::None => continue,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            for v in buf.iter_mut() {
                let z: f64 = r.sample(StandardNormal);
                *v = (z * std) as f32;
            }
        }
        Ok(model)
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        self.arch.conv_indices()
    }

    pub fn num_conv(&self) -> usize {
        self.masks.len()
    }

    pub fn conv(&self, layer: usize) -> Option<&ConvWeights> {
        match self.params.get(layer) {
            Some(LayerParams::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self, layer: usize) -> Option<&mut ConvWeights> {
        match self.params.get_mut(layer) {
            Some(LayerParams::Conv(c)) => Some(c),
            _ => None,
        }
    }

    /// Replaces the masks and zeroes the weights and biases of every pruned filter.
    pub fn set_masks(&mut self, masks: Vec<FilterMask>) -> Result<()> {
        let convs = self.conv_indices();
        if masks.len() != convs.len() {
            return Err(Error::shape(&[convs.len()], &[masks.len()]));
        }
        for (mask, &layer) in masks.iter().zip(&convs) {
            let conv = self.conv(layer).expect("conv layer");
            if mask.len() != conv.n_out {
                return Err(Error::shape(&[conv.n_out], &[mask.len()]));
            }
        }
        self.masks = masks;
        self.apply_masks();
        Ok(())
    }

    /// Zeroes pruned filters so stored weights equal `mask ⊙ weights`.
    pub fn apply_masks(&mut self) {
        let convs = self.conv_indices();
        for (ci, &layer) in convs.iter().enumerate() {
            let dead: Vec<usize> = (0..self.masks[ci].len()).filter(|&j| !self.masks[ci].is_live(j)).collect();
            let conv = self.conv_mut(layer).expect("conv layer");
            for j in dead {
                conv.zero_filter(j);
            }
        }
    }

    pub fn zeros_like_params(&self) -> Vec<LayerParams> {
        self.params.iter().map(LayerParams::zeros_like).collect()
    }

    /// Total number of stored scalars (all weights and biases, masked or not).
    pub fn stored_param_count(&self) -> usize {
        self.params.iter().flat_map(|p| p.buffers()).map(|b| b.len()).sum()
    }

    /// Masks at or below `earlier` for every conv layer.
    pub fn masks_within(&self, earlier: &[FilterMask]) -> bool {
        self.masks.len() == earlier.len() && self.masks.iter().zip(earlier).all(|(m, e)| m.is_subset_of(e))
    }
}
