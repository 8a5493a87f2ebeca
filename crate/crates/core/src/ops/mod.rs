//! Layer kernels: convolution, activation, pooling, linear, loss.

pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use conv::{conv2d_backward, conv2d_forward, ConvWeights};
pub use linear::LinearWeights;

use crate::tensor::Tensor4D;

pub fn relu(x: &Tensor4D) -> Tensor4D {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor4D, grad_out: &Tensor4D) -> Tensor4D {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}
