//! Adam with a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::params::{ParamRole, ParamStore};
use super::scalar::Scalar;
use super::tape::{Gradients, RunningUpdate, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The learning rate is multiplied by this ...
    pub decay: f64,
    /// ... after every this many epochs.
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.1,
            decay_every: 5,
        }
    }
}

impl AdamConfig {
    /// Learning rate for a zero-based epoch index.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let drops = if self.decay_every == 0 {
            0
        } else {
            epoch / self.decay_every
        };
        self.lr * self.decay.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.decay > 0.0) {
            return Err("eps and decay must be positive".into());
        }
        Ok(())
    }
}

/// Moment buffers, one per parameter (empty for non-trainable ones).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |p: &super::params::Param<T>| match p.role {
            ParamRole::Trainable => vec![T::zero(); p.data.len()],
            ParamRole::RunningStat => Vec::new(),
        };
        Self {
            step: 0,
            m: params.iter().map(|(_, p)| zeros(p)).collect(),
            v: params.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    /// Whether the buffers are shaped for `params`.
    pub fn matches(&self, params: &ParamStore<T>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().all(|(id, p)| {
                let n = match p.role {
                    ParamRole::Trainable => p.data.len(),
                    ParamRole::RunningStat => 0,
                };
                self.m[id.index()].len() == n && self.v[id.index()].len() == n
            })
    }

    /// One bias-corrected Adam update of every trainable parameter.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, config: &AdamConfig, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(config.beta1);
        let b2 = T::from_f64_lossy(config.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - config.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - config.beta2.powi(t));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(config.eps);
        let ids: Vec<_> = params.trainable_ids().collect();
        for id in ids {
            let g = grads.param(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let data = params.data_mut(id);
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Blends batch statistics into the stored running statistics.
pub fn apply_running_updates<T: Scalar>(params: &mut ParamStore<T>, updates: &[RunningUpdate<T>]) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        for (r, &b) in params.data_mut(u.mean_param).iter_mut().zip(&u.batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in params.data_mut(u.var_param).iter_mut().zip(&u.batch_var) {
            *r = keep * *r + m * b;
        }
    }
}
