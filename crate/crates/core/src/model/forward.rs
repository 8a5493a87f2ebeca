use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward_live, conv2d_forward_live, Liveness};
use crate::ops::pool::{avgpool_backward, avgpool_forward, maxpool_backward, maxpool_forward};
use crate::ops::{relu, relu_backward};
use crate::tensor::{Dims, Tensor4D};

use super::{LayerParams, LayerSpec, ModelState};

pub struct ForwardOutput {
    pub logits: Tensor4D,
    /// Post-activation output of each conv layer (the following ReLU, if any).
    pub activations: Option<Vec<Tensor4D>>,
}

/// Per-layer inputs saved for backpropagation.
pub struct Trace {
    inputs: Vec<Tensor4D>,
    argmax: Vec<Option<Vec<usize>>>,
    pub logits: Tensor4D,
}

/// Per-layer parameter gradients, parallel to `ModelState::params`.
pub type Gradients = Vec<LayerParams>;

impl ModelState {
    /// For each layer, the conv index whose mask governs the layer's input channels.
    /// `None` when channels cannot be tied to a single mask.
    fn input_mask_source(&self) -> Vec<Option<usize>> {
        let mut src = None;
        let mut conv_pos = 0;
        let mut out = Vec::with_capacity(self.arch.layers.len());
        for layer in &self.arch.layers {
            out.push(src);
            src = match layer {
                LayerSpec::Conv { .. } => {
                    conv_pos += 1;
                    Some(conv_pos - 1)
                }
                LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. } => src,
                _ => None,
            };
        }
        out
    }

    fn check_input(&self, x: &Tensor4D) -> Result<()> {
        let d = x.dims();
        let i = self.arch.input;
        if (d.c, d.h, d.w) != (i.c, i.h, i.w) {
            return Err(Error::shape(&[d.n, i.c, i.h, i.w], &d.to_vec()));
        }
        Ok(())
    }

    fn run(
        &self,
        x: &Tensor4D,
        use_masks: bool,
        keep: bool,
        capture: bool,
    ) -> Result<(Tensor4D, Option<Trace>, Option<Vec<Tensor4D>>)> {
        self.check_input(x)?;
        let sources = self.input_mask_source();
        let layers = &self.arch.layers;
        let mut inputs: Vec<Tensor4D> = Vec::new();
        let mut argmax: Vec<Option<Vec<usize>>> = Vec::new();
        let mut outputs: Vec<Option<Tensor4D>> = vec![None; layers.len()];
        let residual_sources: Vec<usize> = layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Residual { from } => Some(*from),
                _ => None,
            })
            .collect();
        let mut acts = capture.then(Vec::new);
        let mut cur = x.clone();
        let mut conv_pos = 0;
        for (i, layer) in layers.iter().enumerate() {
            let mut arg = None;
            let next = match layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let LayerParams::Conv(w) = &self.params[i] else {
                        unreachable!("conv layer without conv weights")
                    };
                    let live = if use_masks {
                        Liveness {
                            outputs: Some(self.masks[conv_pos].bits()),
                            inputs: sources[i].map(|s| self.masks[s].bits()),
                        }
                    } else {
                        Liveness::default()
                    };
                    conv_pos += 1;
                    conv2d_forward_live(&cur, w, *stride, *pad, live)?
                }
                LayerSpec::Relu => relu(&cur),
                LayerSpec::MaxPool { window, stride } => {
                    let (y, a) = maxpool_forward(&cur, *window, *stride)?;
                    arg = Some(a);
                    y
                }
                LayerSpec::AvgPool { window, stride } => avgpool_forward(&cur, *window, *stride)?,
                LayerSpec::Flatten => {
                    let d = cur.dims();
                    cur.clone().reshape(Dims::new(d.n, d.sample_len(), 1, 1))?
                }
                LayerSpec::Linear { .. } => {
                    let LayerParams::Linear(w) = &self.params[i] else {
                        unreachable!("linear layer without weights")
                    };
                    w.forward(&cur)?
                }
                LayerSpec::Residual { from } => {
                    let skip = outputs[*from].as_ref().expect("residual source retained");
                    let mut y = cur.clone();
                    for (a, b) in y.data_mut().iter_mut().zip(skip.data()) {
                        *a += *b;
                    }
                    y
                }
            };
            if let Some(acts) = acts.as_mut() {
                let is_act = match layer {
                    LayerSpec::Conv { .. } => !matches!(layers.get(i + 1), Some(LayerSpec::Relu)),
                    LayerSpec::Relu => i > 0 && layers[i - 1].is_conv(),
                    _ => false,
                };
                if is_act {
                    acts.push(next.clone());
                }
            }
            if residual_sources.contains(&i) {
                outputs[i] = Some(next.clone());
            }
            if keep {
                inputs.push(std::mem::replace(&mut cur, next));
                argmax.push(arg);
            } else {
                cur = next;
            }
        }
        let trace = keep.then(|| Trace {
            inputs,
            argmax,
            logits: cur.clone(),
        });
        Ok((cur, trace, acts))
    }

    /// Forward pass with pruned filters contributing exactly zero.
    pub fn masked_forward(&self, x: &Tensor4D, capture: bool) -> Result<ForwardOutput> {
        let (logits, _, activations) = self.run(x, true, false, capture)?;
        Ok(ForwardOutput { logits, activations })
    }

    pub fn logits(&self, x: &Tensor4D) -> Result<Tensor4D> {
        Ok(self.run(x, true, false, false)?.0)
    }

    /// Forward pass that ignores masks and uses stored weights as-is.
    pub fn forward_dense(&self, x: &Tensor4D) -> Result<Tensor4D> {
        Ok(self.run(x, false, false, false)?.0)
    }

    pub fn forward_train(&self, x: &Tensor4D) -> Result<Trace> {
        Ok(self.run(x, true, true, false)?.1.expect("trace kept"))
    }

    /// Parameter gradients of `sum(grad_logits ⊙ logits)`. Pruned filters get zero gradient.
    pub fn backward(&self, trace: &Trace, grad_logits: &Tensor4D) -> Result<Gradients> {
        if grad_logits.dims() != trace.logits.dims() {
            return Err(Error::shape(&trace.logits.dims().to_vec(), &grad_logits.dims().to_vec()));
        }
        let sources = self.input_mask_source();
        let layers = &self.arch.layers;
        let conv_ids = self.conv_indices();
        let mut grads = self.zeros_like_params();
        let mut pending: Vec<Option<Tensor4D>> = vec![None; layers.len()];
        let mut g = grad_logits.clone();
        for i in (0..layers.len()).rev() {
            if let Some(extra) = pending[i].take() {
                for (a, b) in g.data_mut().iter_mut().zip(extra.data()) {
                    *a += *b;
                }
            }
            let x = &trace.inputs[i];
            g = match &layers[i] {
                LayerSpec::Conv { stride, pad, .. } => {
                    let LayerParams::Conv(w) = &self.params[i] else {
                        unreachable!()
                    };
                    let pos = conv_ids.iter().position(|&c| c == i).expect("conv index");
                    let live = Liveness {
                        outputs: Some(self.masks[pos].bits()),
                        inputs: sources[i].map(|s| self.masks[s].bits()),
                    };
                    let out = conv2d_backward_live(x, w, &g, *stride, *pad, live, i > 0)?;
                    grads[i] = LayerParams::Conv(out.grad_w);
                    match out.grad_x {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                LayerSpec::Relu => relu_backward(x, &g),
                LayerSpec::MaxPool { .. } => maxpool_backward(x.dims(), trace.argmax[i].as_ref().expect("argmax kept"), &g),
                LayerSpec::AvgPool { window, stride } => avgpool_backward(x.dims(), *window, *stride, &g),
                LayerSpec::Flatten => g.reshape(x.dims())?,
                LayerSpec::Linear { .. } => {
                    let LayerParams::Linear(w) = &self.params[i] else {
                        unreachable!()
                    };
                    let (gx, gw) = w.backward(x, &g)?;
                    grads[i] = LayerParams::Linear(gw);
                    gx
                }
                LayerSpec::Residual { from } => {
                    let slot = &mut pending[*from];
                    match slot {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += *b;
                            }
                        }
                        None => *slot = Some(g.clone()),
                    }
                    g
                }
            };
        }
        Ok(grads)
    }
}
