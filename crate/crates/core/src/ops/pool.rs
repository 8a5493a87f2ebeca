use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4D};

fn pooled_dims(x: Dims, window: usize, stride: usize) -> Result<Dims> {
    if window == 0 || stride == 0 || x.h < window || x.w < window {
        return Err(Error::InvalidShape(format!(
            "pool window {window} stride {stride} does not fit {}x{}",
            x.h, x.w
        )));
    }
    Ok(Dims::new(x.n, x.c, (x.h - window) / stride + 1, (x.w - window) / stride + 1))
}

pub fn pooled_extent(input: usize, window: usize, stride: usize) -> Option<usize> {
    (window > 0 && stride > 0 && input >= window).then(|| (input - window) / stride + 1)
}

/// Max pooling; also returns the flat input index chosen for each output.
pub fn maxpool_forward(x: &Tensor4D, window: usize, stride: usize) -> Result<(Tensor4D, Vec<usize>)> {
    let xd = x.dims();
    let od = pooled_dims(xd, window, stride)?;
    let mut out = Tensor4D::zeros(od);
    let mut argmax = vec![0usize; od.len()];
    let mut idx = 0;
    for n in 0..xd.n {
        for c in 0..xd.c {
            for oh in 0..od.h {
                for ow in 0..od.w {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = x.index(n, c, oh * stride, ow * stride);
                    for dh in 0..window {
                        for dw in 0..window {
                            let i = x.index(n, c, oh * stride + dh, ow * stride + dw);
                            let v = x.data()[i];
                            if v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                    }
                    out.data_mut()[idx] = best;
                    argmax[idx] = best_i;
                    idx += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward(input_dims: Dims, argmax: &[usize], grad_out: &Tensor4D) -> Tensor4D {
    let mut gx = Tensor4D::zeros(input_dims);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx.data_mut()[i] += g;
    }
    gx
}

pub fn avgpool_forward(x: &Tensor4D, window: usize, stride: usize) -> Result<Tensor4D> {
    let xd = x.dims();
    let od = pooled_dims(xd, window, stride)?;
    let mut out = Tensor4D::zeros(od);
    let scale = 1.0 / (window * window) as f64;
    let mut idx = 0;
    for n in 0..xd.n {
        for c in 0..xd.c {
            for oh in 0..od.h {
                for ow in 0..od.w {
                    let mut s = 0f64;
                    for dh in 0..window {
                        for dw in 0..window {
                            s += x.at(n, c, oh * stride + dh, ow * stride + dw) as f64;
                        }
                    }
                    out.data_mut()[idx] = (s * scale) as f32;
                    idx += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn avgpool_backward(input_dims: Dims, window: usize, stride: usize, grad_out: &Tensor4D) -> Tensor4D {
    let mut gx = Tensor4D::zeros(input_dims);
    let od = grad_out.dims();
    let scale = 1.0 / (window * window) as f32;
    let mut idx = 0;
    for n in 0..od.n {
        for c in 0..od.c {
            for oh in 0..od.h {
                for ow in 0..od.w {
                    let g = grad_out.data()[idx] * scale;
                    for dh in 0..window {
                        for dw in 0..window {
                            let i = gx.index(n, c, oh * stride + dh, ow * stride + dw);
                            gx.data_mut()[i] += g;
                        }
                    }
                    idx += 1;
                }
            }
        }
    }
    gx
}
