use super::{Model, Scalar, Tensor};
use crate::error::{Error, Result};

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct SgdState<T: Scalar = f32> {
    pub velocity: Vec<Tensor<T>>,
}

/// `v <- momentum v + grad + weight_decay w`, then `w <- w - lr v`.
pub fn sgd_step<T: Scalar>(model: &mut Model<T>, state: &mut SgdState<T>, lr: f64, momentum: f64, weight_decay: f64) {
    let pairs = model.params_and_grads_mut();
    if state.velocity.len() != pairs.len() {
        state.velocity = pairs.iter().map(|(w, _)| Tensor::zeros(w.shape.clone())).collect();
    }
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((w, g), v) in pairs.into_iter().zip(state.velocity.iter_mut()) {
        for ((wi, &gi), vi) in w.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *vi = mu * *vi + gi + wd * *wi;
            *wi -= lr * *vi;
        }
    }
}

/// Multi-step schedule: `base * factor^(number of milestones <= epoch)`.
pub fn lr_at(base: f64, milestones: &[usize], factor: f64, epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base * factor.powi(passed as i32)
}

/// Running mean of parameter snapshots.
#[derive(Debug, Clone, Default)]
pub struct SwaState<T: Scalar = f32> {
    pub n_averaged: usize,
    pub weights: Vec<Tensor<T>>,
}

impl<T: Scalar> SwaState<T> {
    pub fn update(&mut self, model: &Model<T>) {
        let params = model.params();
        if self.n_averaged == 0 {
            self.weights = params.iter().map(|(_, t)| (*t).clone()).collect();
            self.n_averaged = 1;
            return;
        }
        self.n_averaged += 1;
        let inv = 1.0 / self.n_averaged as f64;
        for (avg, (_, cur)) in self.weights.iter_mut().zip(params) {
            for (a, &c) in avg.data.iter_mut().zip(&cur.data) {
                *a = T::from_f64(a.to_f64() + (c.to_f64() - a.to_f64()) * inv);
            }
        }
    }

    /// Copies the averaged weights into `model`.
    pub fn swap_into(&self, model: &mut Model<T>) -> Result<()> {
        if self.n_averaged == 0 {
            return Err(Error::InvalidInput("no weights averaged yet".into()));
        }
        for ((w, _), avg) in model.params_and_grads_mut().into_iter().zip(&self.weights) {
            w.data.copy_from_slice(&avg.data);
        }
        Ok(())
    }
}
