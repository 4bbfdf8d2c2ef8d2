//! AdamW with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::nn::{ParamGrads, ParamStore};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(TensorError::InvalidValue(format!(
                "learning rate {lr} must be positive"
            )));
        }
        let c = self.config;
        self.step += 1;
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let step_size = T::from_f64(lr / bc1);
        let sqrt_bc2 = T::from_f64(bc2.sqrt());
        let eps = T::from_f64(c.eps);
        for (id, g) in grads.iter() {
            if !params.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let w = params.get_mut(id);
            if w.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    detail: format!("param {:?} vs grad {:?}", w.shape(), g.shape()),
                });
            }
            for (((w, &g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w = *w * decay - step_size * *m / (v.sqrt() / sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
