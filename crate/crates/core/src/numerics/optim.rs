//! Adam with bias correction and a warmup + step-decay learning rate.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn for_params(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }
}

impl Adam {
    /// One update of every parameter. A `None` gradient counts as zero.
    pub fn step<T: Real>(
        &self,
        params: &mut [Tensor<T>],
        grads: &[Option<Tensor<T>>],
        state: &mut AdamState<T>,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::contract(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = &grads[i] {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adam_step", p.shape(), g.shape()));
                }
            }
            if state.m[i].shape() != p.shape() {
                return Err(Error::shape("adam_step", p.shape(), state.m[i].shape()));
            }
        }
        state.t += 1;
        let t = state.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else {
                // zero gradient: decay moments, apply residual momentum
                let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
                for j in 0..m.len() {
                    m[j] *= b1;
                    v[j] *= b2;
                }
                let (m, v) = (state.m[i].data(), state.v[i].data());
                for (j, w) in p.data_mut().iter_mut().enumerate() {
                    if m[j] != T::zero() {
                        *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
                continue;
            };
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for ((w, &gj), (mj, vj)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mj = b1 * *mj + (one - b1) * gj;
                *vj = b2 * *vj + (one - b2) * gj * gj;
                *w -= lr * (*mj / c1) / ((*vj / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup then multiplicative decay at fixed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    /// Warmup 5e-7 to 5e-6 over 10 epochs, ÷10 at epochs 30 and 50.
    pub fn clip_reid() -> Self {
        LrSchedule {
            base_lr: 5e-6,
            warmup_epochs: 10,
            warmup_start_lr: 5e-7,
            decay_epochs: vec![30, 50],
            decay_factor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.warmup_start_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor must lie in (0, 1]"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay_epochs must be strictly increasing"));
        }
        Ok(())
    }

    /// Learning rate for the 0-based `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let base = if epoch < self.warmup_epochs {
            let frac = epoch as f64 / self.warmup_epochs as f64;
            self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * frac
        } else {
            self.base_lr
        };
        let drops = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        base * self.decay_factor.powi(drops as i32)
    }
}
