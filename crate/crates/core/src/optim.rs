//! Adam and the reduce-on-plateau learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers for a fixed, ordered list of named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    /// Zeroed state mirroring `(name, shape)` pairs.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Self {
        let (mut names, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for (name, shape) in params {
            names.push(name.to_string());
            m.push(Tensor::zeros(shape));
            v.push(Tensor::zeros(shape));
        }
        Self { config, step: 0, names, m, v }
    }

    /// One update of every parameter. Nothing is modified if any gradient is
    /// non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("state tracks {} parameters, got {} params / {} grads", self.m.len(), params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: state {:?}, param {:?}, grad {:?}", self.names[i], self.m[i].shape(), p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(self.names[i].clone()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without a
/// strictly lower validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub best: f64,
    pub stale: u32,
    pub patience: u32,
    pub factor: f64,
    pub min_lr: f64,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: u32, factor: f64, min_lr: f64) -> Self {
        Self { lr, best: f64::INFINITY, stale: 0, patience, factor, min_lr }
    }

    /// Feeds one epoch's validation loss; returns the (possibly reduced) lr.
    pub fn update(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stale = 0;
            }
        }
        self.lr
    }
}
