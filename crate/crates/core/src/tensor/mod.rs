//! Dense NCHW tensors in 64-bit floats and the forward operators over them.

mod ops;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use ops::{
    avg_pool, batchnorm_inference, concat_channels, conv2d, elementwise_sum, fake_swish,
    global_avg_pool, max_pool, pool_reciprocal, relu, swish, BatchNormRecord,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("pooling window {kernel:?} with padding {padding:?} does not fit input {input:?}")]
    EmptyOutput {
        kernel: [usize; 2],
        padding: [usize; 2],
        input: [usize; 2],
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self, TensorError> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(TensorError::Shape(format!(
                "{} values for shape {shape:?} ({want} expected)",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Independent standard-normal entries.
    pub fn standard_normal<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Self {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution weights laid out as `(k1, k2, in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Kernel {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Kernel {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self, TensorError> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(TensorError::Shape(format!(
                "{} weights for kernel {dims:?} ({want} expected)",
                data.len()
            )));
        }
        Ok(Kernel { dims, data })
    }

    /// The identity kernel: 1 at the spatial center where in == out, else 0.
    pub fn identity(k1: usize, k2: usize, channels: usize) -> Self {
        let mut w = Kernel::zeros([k1, k2, channels, channels]);
        let (cp, cq) = (k1 / 2, k2 / 2);
        for t in 0..channels {
            w.set(cp, cq, t, t, 1.0);
        }
        w
    }

    /// `(k1, k2, in, out)`
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, p: usize, q: usize, t: usize, j: usize) -> usize {
        let [_, k2, ci, co] = self.dims;
        ((p * k2 + q) * ci + t) * co + j
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize, t: usize, j: usize) -> f64 {
        self.data[self.offset(p, q, t, j)]
    }

    #[inline]
    pub fn set(&mut self, p: usize, q: usize, t: usize, j: usize, v: f64) {
        let o = self.offset(p, q, t, j);
        self.data[o] = v;
    }
}
