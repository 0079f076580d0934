use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction over a fixed, registered parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// Registers moment buffers matching `shapes`.
    pub fn new(shapes: &[Vec<usize>], learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        AdamState {
            beta1,
            beta2,
            learning_rate,
            epsilon,
            step_count: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub(crate) fn from_parts(
        hyper: [f64; 4],
        step_count: u64,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
    ) -> Self {
        AdamState {
            learning_rate: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            epsilon: hyper[3],
            step_count,
            first,
            second,
        }
    }

    /// One update of every registered parameter.
    pub fn step(&mut self, params: &mut [Arc<Tensor>], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "adam registered {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[k].shape() || g.shape() != self.first[k].shape() {
                return Err(Error::Contract(format!(
                    "parameter {k} is not registered with shape {:?}",
                    p.shape()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let p = Arc::make_mut(p).data_mut();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
