use crate::error::{Error, Result};
use crate::float::{c, Float};
use crate::params::ParamStore;

/// Adaptive-moment optimizer with decoupled weight decay and linear warmup.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the learning rate ramps linearly from 0 to `lr`; 0 disables.
    pub warmup_steps: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: 1000,
        }
    }
}

impl AdamW {
    /// Learning rate used for the `step`-th update (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Updates every trainable parameter from its gradient.
    pub fn step<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, p) in store.iter() {
            if p.requires_grad && p.grad.is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        let (b1, b2) = (c::<T>(self.beta1), c::<T>(self.beta2));
        let one = T::one();
        for (_, p) in store.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            p.step += 1;
            let t = p.step as i32;
            let lr = c::<T>(self.lr_at(p.step));
            let decay = one - lr * c(self.weight_decay);
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);
            let eps = c::<T>(self.eps);
            let grad = p.grad.as_ref().expect("checked above").data();
            let value = p.value.data_mut();
            for k in 0..value.len() {
                let g = grad[k];
                p.m[k] = b1 * p.m[k] + (one - b1) * g;
                p.v[k] = b2 * p.v[k] + (one - b2) * g * g;
                let mhat = p.m[k] / bc1;
                let vhat = p.v[k] / bc2;
                value[k] = value[k] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
