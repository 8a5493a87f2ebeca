//! Dense rank-4 tensors in NCHW layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }
}

/// Row-major N→C→H→W array of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D {
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor4D {
    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn ones(dims: Dims) -> Self {
        Self::filled(dims, 1.0)
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        assert!(
            dims.n >= 1 && dims.c >= 1 && dims.h >= 1 && dims.w >= 1,
            "tensor dims must be >= 1: {dims:?}"
        );
        Tensor4D {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if dims.n == 0 || dims.c == 0 || dims.h == 0 || dims.w == 0 {
            return Err(Error::InvalidShape(format!("zero-sized dims {dims:?}")));
        }
        if data.len() != dims.len() {
            return Err(Error::shape(&[dims.len()], &[data.len()]));
        }
        Ok(Tensor4D { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.dims.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// The `h×w` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    /// Same data viewed with new dims of equal length.
    pub fn reshape(self, dims: Dims) -> Result<Self> {
        if dims.len() != self.data.len() {
            return Err(Error::shape(&dims.to_vec(), &self.dims.to_vec()));
        }
        Ok(Tensor4D { dims, data: self.data })
    }

    /// Gathers the given samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> Tensor4D {
        let len = self.dims.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4D {
            dims: Dims {
                n: indices.len(),
                ..self.dims
            },
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4D {
        Tensor4D {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor4D) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
