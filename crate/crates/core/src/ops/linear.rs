use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4D};

/// Fully connected layer, weights stored `out × in` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearWeights {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LinearWeights {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        LinearWeights {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn row(&self, o: usize) -> &[f32] {
        &self.weight[o * self.in_features..(o + 1) * self.in_features]
    }

    /// `x` is `n × in_features` (any trailing shape that flattens to it).
    pub fn forward(&self, x: &Tensor4D) -> Result<Tensor4D> {
        let xd = x.dims();
        if xd.sample_len() != self.in_features {
            return Err(Error::shape(&[xd.n, self.in_features], &[xd.n, xd.sample_len()]));
        }
        let mut out = Tensor4D::zeros(Dims::new(xd.n, self.out_features, 1, 1));
        for n in 0..xd.n {
            let xs = x.sample(n);
            for o in 0..self.out_features {
                let s: f64 = self.row(o).iter().zip(xs).map(|(&w, &v)| w as f64 * v as f64).sum();
                out.data_mut()[n * self.out_features + o] = (s + self.bias[o] as f64) as f32;
            }
        }
        Ok(out)
    }

    /// Returns `(grad_x, grad_weights)`.
    pub fn backward(&self, x: &Tensor4D, grad_out: &Tensor4D) -> Result<(Tensor4D, LinearWeights)> {
        let xd = x.dims();
        let gd = grad_out.dims();
        if gd.n != xd.n || gd.sample_len() != self.out_features {
            return Err(Error::shape(&[xd.n, self.out_features], &[gd.n, gd.sample_len()]));
        }
        let mut gw = LinearWeights::zeros(self.in_features, self.out_features);
        for o in 0..self.out_features {
            let mut gb = 0f64;
            for n in 0..xd.n {
                gb += grad_out.data()[n * self.out_features + o] as f64;
            }
            gw.bias[o] = gb as f32;
            for i in 0..self.in_features {
                let mut s = 0f64;
                for n in 0..xd.n {
                    s += grad_out.data()[n * self.out_features + o] as f64 * x.sample(n)[i] as f64;
                }
                gw.weight[o * self.in_features + i] = s as f32;
            }
        }
        let mut gx = Tensor4D::zeros(xd);
        for n in 0..xd.n {
            for i in 0..self.in_features {
                let mut s = 0f64;
                for o in 0..self.out_features {
                    s += grad_out.data()[n * self.out_features + o] as f64 * self.weight[o * self.in_features + i] as f64;
                }
                gx.data_mut()[n * self.in_features + i] = s as f32;
            }
        }
        Ok((gx, gw))
    }
}
