use crate::error::{Error, Result};
use crate::ops::{ConvWeights, LinearWeights};

use super::{Architecture, LayerParams, LayerSpec, ModelState};

/// Physically removes pruned filters and the input slices that consumed them.
///
/// The result has full masks and produces the same logits as the masked model.
pub fn export_compact(model: &ModelState) -> Result<ModelState> {
    if !model.arch.is_sequential() {
        return Err(Error::UnsupportedTopology(
            "compaction requires a sequential chain; residual connections cannot be compacted".into(),
        ));
    }
    let shapes = model.arch.shapes()?;
    let mut layers = Vec::with_capacity(model.arch.layers.len());
    let mut params = Vec::with_capacity(model.params.len());
    // live channel indices of the tensor flowing into the current layer
    let mut keep: Option<Vec<usize>> = None;
    let mut conv_pos = 0;

    for (i, spec) in model.arch.layers.iter().enumerate() {
        match (spec, &model.params[i]) {
            (
                &LayerSpec::Conv {
                    n_in, k, stride, pad, ..
                },
                LayerParams::Conv(w),
            ) => {
                let inputs = keep.clone().unwrap_or_else(|| (0..n_in).collect());
                let outputs = model.masks[conv_pos].live_indices();
                conv_pos += 1;
                let mut filters = Vec::with_capacity(outputs.len() * inputs.len() * k * k);
                for &o in &outputs {
                    let f = w.filter(o);
                    for &c in &inputs {
                        filters.extend_from_slice(&f[c * k * k..(c + 1) * k * k]);
                    }
                }
                let bias = w.bias.as_ref().map(|b| outputs.iter().map(|&o| b[o]).collect());
                let cw = ConvWeights::new(outputs.len(), inputs.len(), k, filters, bias)?;
                layers.push(LayerSpec::conv(inputs.len(), outputs.len(), k, stride, pad));
                params.push(LayerParams::Conv(cw));
                keep = Some(outputs);
            }
            (LayerSpec::Flatten, _) => {
                let prev = if i == 0 { model.arch.input } else { shapes[i - 1] };
                let plane = prev.h * prev.w;
                keep = keep.map(|chans| chans.iter().flat_map(|&c| c * plane..(c + 1) * plane).collect());
                layers.push(LayerSpec::Flatten);
                params.push(LayerParams::None);
            }
            (
                &LayerSpec::Linear {
                    in_features,
                    out_features,
                },
                LayerParams::Linear(w),
            ) => {
                let inputs = keep.take().unwrap_or_else(|| (0..in_features).collect());
                let mut lw = LinearWeights::zeros(inputs.len(), out_features);
                for o in 0..out_features {
                    let row = w.row(o);
                    for (dst, &src) in inputs.iter().enumerate() {
                        lw.weight[o * inputs.len() + dst] = row[src];
                    }
                }
                lw.bias.copy_from_slice(&w.bias);
                layers.push(LayerSpec::Linear {
                    in_features: inputs.len(),
                    out_features,
                });
                params.push(LayerParams::Linear(lw));
            }
            (spec, _) => {
                layers.push(spec.clone());
                params.push(LayerParams::None);
            }
        }
    }

    let arch = Architecture {
        input: model.arch.input,
        layers,
    };
    arch.validate()?;
    let mut out = ModelState::zeros(arch)?;
    out.params = params;
    out.epoch = model.epoch;
    out.round = model.round;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{total_accounting, Shape};
    use crate::rng::RngState;

    #[test]
    fn unpruned_model_is_unchanged() {
        let model = ModelState::init(Architecture::toy4(4), &RngState::new(3)).unwrap();
        let c = export_compact(&model).unwrap();
        assert_eq!(c.arch, model.arch);
        assert_eq!(c.params, model.params);
    }

    #[test]
    fn last_conv_filter_removes_linear_features() {
        let arch = Architecture {
            input: Shape::new(1, 4, 4),
            layers: vec![
                LayerSpec::conv(1, 3, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::conv(3, 4, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 64,
                    out_features: 2,
                },
            ],
        };
        let mut model = ModelState::init(arch, &RngState::new(9)).unwrap();
        let mut masks = model.masks.clone();
        masks[1].prune(2);
        model.set_masks(masks).unwrap();
        let c = export_compact(&model).unwrap();
        assert_eq!(c.arch.layers[2], LayerSpec::conv(3, 3, 3, 1, 1));
        assert_eq!(
            c.arch.layers[5],
            LayerSpec::Linear {
                in_features: 48,
                out_features: 2
            }
        );
        assert_eq!(total_accounting(&c).total_params, total_accounting(&model).total_params);
    }

    #[test]
    fn residual_topology_rejected() {
        let arch = Architecture {
            input: Shape::new(2, 4, 4),
            layers: vec![
                LayerSpec::conv(2, 4, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::conv(4, 4, 3, 1, 1),
                LayerSpec::Residual { from: 1 },
            ],
        };
        let model = ModelState::zeros(arch).unwrap();
        assert!(matches!(export_compact(&model), Err(Error::UnsupportedTopology(_))));
    }
}
