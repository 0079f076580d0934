//! Dense row-major tensors, a reverse-mode tape, Adam and a finite-difference
//! gradient oracle.

mod adam;
mod gradcheck;
mod kernels;
mod tape;

pub use adam::AdamState;
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use kernels::{conv2d_output_extent, gemm};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Guard used by divisions and norms that can vanish.
pub const EPSILON_DIV: f64 = 1e-12;

/// Fill rule for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Constant(f64),
    Uniform { low: f64, high: f64, seed: u64 },
    Gaussian { mean: f64, std: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = validate_shape(shape)?;
        if n != data.len() {
            return Err(Error::mismatch("tensor_new", shape, &[data.len()]));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data,
        };
        t.ensure_finite("tensor_new")?;
        Ok(t)
    }

    pub fn create(shape: &[usize], fill: Init) -> Result<Self> {
        let n = validate_shape(shape)?;
        let data = match fill {
            Init::Constant(c) => vec![c; n],
            Init::Uniform { low, high, seed } => {
                if !(low < high) {
                    return Err(Error::Config(format!("uniform fill needs low < high, got [{low}, {high})")));
                }
                let mut r = rng::stream(seed, &[rng::tag::INIT]);
                (0..n).map(|_| r.gen_range(low..high)).collect()
            }
            Init::Gaussian { mean, std, seed } => {
                let normal = Normal::new(mean, std)
                    .map_err(|e| Error::Config(format!("gaussian fill: {e}")))?;
                let mut r = rng::stream(seed, &[rng::tag::INIT]);
                (0..n).map(|_| normal.sample(&mut r)).collect()
            }
        };
        Tensor::new(shape, data)
    }

    /// Zero tensor for shapes already known to be valid.
    pub(crate) fn zeros(shape: &[usize]) -> Self {
        debug_assert!(validate_shape(shape).is_ok());
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(v: &[f64]) -> Result<Self> {
        Tensor::new(&[v.len()], v.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n = validate_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::mismatch("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}
