//! 2-D cross-correlation with `f64` accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4D};

/// Filter bank `n_out × n_in × k × k` plus optional bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvWeights {
    pub n_out: usize,
    pub n_in: usize,
    pub k: usize,
    pub filters: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl ConvWeights {
    pub fn zeros(n_out: usize, n_in: usize, k: usize, with_bias: bool) -> Self {
        assert!(n_out >= 1 && n_in >= 1 && k >= 1, "conv dims must be >= 1");
        ConvWeights {
            n_out,
            n_in,
            k,
            filters: vec![0.0; n_out * n_in * k * k],
            bias: with_bias.then(|| vec![0.0; n_out]),
        }
    }

    pub fn new(n_out: usize, n_in: usize, k: usize, filters: Vec<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        if n_out == 0 || n_in == 0 || k == 0 {
            return Err(Error::InvalidShape(format!(
                "conv weights need n_out, n_in, k >= 1 (got {n_out}, {n_in}, {k})"
            )));
        }
        let expected = n_out * n_in * k * k;
        if filters.len() != expected {
            return Err(Error::shape(&[n_out, n_in, k, k], &[filters.len()]));
        }
        if let Some(b) = &bias {
            if b.len() != n_out {
                return Err(Error::shape(&[n_out], &[b.len()]));
            }
        }
        Ok(ConvWeights {
            n_out,
            n_in,
            k,
            filters,
            bias,
        })
    }

    /// Elements in one filter (`n_in·k·k`).
    #[inline]
    pub fn filter_len(&self) -> usize {
        self.n_in * self.k * self.k
    }

    pub fn filter(&self, o: usize) -> &[f32] {
        let len = self.filter_len();
        &self.filters[o * len..(o + 1) * len]
    }

    pub fn filter_mut(&mut self, o: usize) -> &mut [f32] {
        let len = self.filter_len();
        &mut self.filters[o * len..(o + 1) * len]
    }

    #[inline]
    fn at(&self, o: usize, c: usize, kh: usize, kw: usize) -> f32 {
        self.filters[((o * self.n_in + c) * self.k + kh) * self.k + kw]
    }

    pub fn bias_at(&self, o: usize) -> f32 {
        self.bias.as_ref().map_or(0.0, |b| b[o])
    }

    /// Zeroes filter `o` and its bias.
    pub fn zero_filter(&mut self, o: usize) {
        self.filter_mut(o).fill(0.0);
        if let Some(b) = self.bias.as_mut() {
            b[o] = 0.0;
        }
    }
}

/// Output spatial size of a convolution or pooling window, if positive and integral.
pub fn output_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k || !(padded - k).is_multiple_of(stride) {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Channel liveness used to skip masked-out work. `None` means all live.
#[derive(Debug, Clone, Copy, Default)]
pub struct Liveness<'a> {
    pub outputs: Option<&'a [bool]>,
    pub inputs: Option<&'a [bool]>,
}

impl Liveness<'_> {
    #[inline]
    fn out(&self, o: usize) -> bool {
        self.outputs.is_none_or(|m| m[o])
    }

    #[inline]
    fn inp(&self, c: usize) -> bool {
        self.inputs.is_none_or(|m| m[c])
    }
}

/// Range of output rows/cols `o` for which `o*stride + tap - pad` lands in `[0, input)`.
#[inline]
fn valid_range(input: usize, out: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi_num = input as isize - 1 + pad as isize - tap as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / stride + 1).min(out);
    (lo, hi.max(lo))
}

fn check_geometry(x: Dims, w: &ConvWeights, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if x.c != w.n_in {
        return Err(Error::shape(&[x.n, w.n_in, x.h, x.w], &x.to_vec()));
    }
    let ho = output_extent(x.h, w.k, stride, pad);
    let wo = output_extent(x.w, w.k, stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok((ho, wo)),
        _ => Err(Error::InvalidShape(format!(
            "conv k={} stride={stride} pad={pad} does not tile input {}x{}",
            w.k, x.h, x.w
        ))),
    }
}

pub fn conv2d_forward(x: &Tensor4D, w: &ConvWeights, stride: usize, pad: usize) -> Result<Tensor4D> {
    conv2d_forward_live(x, w, stride, pad, Liveness::default())
}

/// Forward pass that leaves dead output channels at exactly zero (no bias) and
/// skips dead input channels, which must themselves be all zero.
pub fn conv2d_forward_live(x: &Tensor4D, w: &ConvWeights, stride: usize, pad: usize, live: Liveness<'_>) -> Result<Tensor4D> {
    let xd = x.dims();
    let (ho, wo) = check_geometry(xd, w, stride, pad)?;
    let od = Dims::new(xd.n, w.n_out, ho, wo);
    let mut out = Tensor4D::zeros(od);
    let k = w.k;
    let mut acc = vec![0f64; ho * wo];
    let xdata = x.data();
    let plane_in = xd.plane();

    for n in 0..xd.n {
        for o in 0..w.n_out {
            if !live.out(o) {
                continue;
            }
            acc.fill(0.0);
            for c in 0..w.n_in {
                if !live.inp(c) {
                    continue;
                }
                let xp = &xdata[(n * xd.c + c) * plane_in..(n * xd.c + c + 1) * plane_in];
                for kh in 0..k {
                    let (oh0, oh1) = valid_range(xd.h, ho, kh, stride, pad);
                    for kw in 0..k {
                        let wv = w.at(o, c, kh, kw) as f64;
                        let (ow0, ow1) = valid_range(xd.w, wo, kw, stride, pad);
                        for oh in oh0..oh1 {
                            let ih = oh * stride + kh - pad;
                            let row = &xp[ih * xd.w..(ih + 1) * xd.w];
                            let arow = &mut acc[oh * wo..(oh + 1) * wo];
                            for ow in ow0..ow1 {
                                let iw = ow * stride + kw - pad;
                                arow[ow] += wv * row[iw] as f64;
                            }
                        }
                    }
                }
            }
            let b = w.bias_at(o) as f64;
            let start = out.index(n, o, 0, 0);
            for (dst, a) in out.data_mut()[start..start + ho * wo].iter_mut().zip(&acc) {
                *dst = (a + b) as f32;
            }
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out ⊙ conv(x, w))` with respect to `x` and `w`.
pub struct ConvGrads {
    pub grad_x: Option<Tensor4D>,
    pub grad_w: ConvWeights,
}

pub fn conv2d_backward(
    x: &Tensor4D,
    w: &ConvWeights,
    grad_out: &Tensor4D,
    stride: usize,
    pad: usize,
) -> Result<(Tensor4D, ConvWeights)> {
    let g = conv2d_backward_live(x, w, grad_out, stride, pad, Liveness::default(), true)?;
    Ok((g.grad_x.expect("requested grad_x"), g.grad_w))
}

/// Backward pass. Dead output filters get zero gradient; dead input channels
/// get zero input gradient.
pub fn conv2d_backward_live(
    x: &Tensor4D,
    w: &ConvWeights,
    grad_out: &Tensor4D,
    stride: usize,
    pad: usize,
    live: Liveness<'_>,
    need_grad_x: bool,
) -> Result<ConvGrads> {
    let xd = x.dims();
    let (ho, wo) = check_geometry(xd, w, stride, pad)?;
    let gd = grad_out.dims();
    let expected = Dims::new(xd.n, w.n_out, ho, wo);
    if gd != expected {
        return Err(Error::shape(&expected.to_vec(), &gd.to_vec()));
    }
    let k = w.k;
    let plane_in = xd.plane();
    let plane_out = ho * wo;
    let xdata = x.data();
    let gdata = grad_out.data();

    let mut grad_w = ConvWeights::zeros(w.n_out, w.n_in, k, w.bias.is_some());
    for o in 0..w.n_out {
        if !live.out(o) {
            continue;
        }
        if let Some(gb) = grad_w.bias.as_mut() {
            let mut s = 0f64;
            for n in 0..xd.n {
                let gp = &gdata[(n * w.n_out + o) * plane_out..(n * w.n_out + o + 1) * plane_out];
                s += gp.iter().map(|&v| v as f64).sum::<f64>();
            }
            gb[o] = s as f32;
        }
        for c in 0..w.n_in {
            if !live.inp(c) {
                continue;
            }
            for kh in 0..k {
                let (oh0, oh1) = valid_range(xd.h, ho, kh, stride, pad);
                for kw in 0..k {
                    let (ow0, ow1) = valid_range(xd.w, wo, kw, stride, pad);
                    let mut s = 0f64;
                    for n in 0..xd.n {
                        let gp = &gdata[(n * w.n_out + o) * plane_out..];
                        let xp = &xdata[(n * xd.c + c) * plane_in..];
                        for oh in oh0..oh1 {
                            let ih = oh * stride + kh - pad;
                            for ow in ow0..ow1 {
                                let iw = ow * stride + kw - pad;
                                s += gp[oh * wo + ow] as f64 * xp[ih * xd.w + iw] as f64;
                            }
                        }
                    }
                    grad_w.filters[((o * w.n_in + c) * k + kh) * k + kw] = s as f32;
                }
            }
        }
    }

    let grad_x = if need_grad_x {
        let mut gx = Tensor4D::zeros(xd);
        let mut acc = vec![0f64; plane_in];
        for n in 0..xd.n {
            for c in 0..xd.c {
                if !live.inp(c) {
                    continue;
                }
                acc.fill(0.0);
                for o in 0..w.n_out {
                    if !live.out(o) {
                        continue;
                    }
                    let gp = &gdata[(n * w.n_out + o) * plane_out..(n * w.n_out + o + 1) * plane_out];
                    for kh in 0..k {
                        let (oh0, oh1) = valid_range(xd.h, ho, kh, stride, pad);
                        for kw in 0..k {
                            let wv = w.at(o, c, kh, kw) as f64;
                            let (ow0, ow1) = valid_range(xd.w, wo, kw, stride, pad);
                            for oh in oh0..oh1 {
                                let ih = oh * stride + kh - pad;
                                for ow in ow0..ow1 {
                                    let iw = ow * stride + kw - pad;
                                    acc[ih * xd.w + iw] += wv * gp[oh * wo + ow] as f64;
                                }
                            }
                        }
                    }
                }
                let start = gx.index(n, c, 0, 0);
                for (dst, a) in gx.data_mut()[start..start + plane_in].iter_mut().zip(&acc) {
                    *dst = *a as f32;
                }
            }
        }
        Some(gx)
    } else {
        None
    };

    Ok(ConvGrads { grad_x, grad_w })
}
