use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter in store order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .values()
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Missing gradients count as zero for the moments.
    ///
    /// Every gradient is checked for NaN/Inf before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} gradients and {} moment slots for {} parameters",
                    grads.len(),
                    self.m.len(),
                    store.len()
                ),
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        param: store.name(id).to_string(),
                    });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            match &grads[i] {
                Some(g) => {
                    for (((pj, mj), vj), &gj) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                        let gj = gj.as_f64();
                        let mn = c.beta1 * mj.as_f64() + (1.0 - c.beta1) * gj;
                        let vn = c.beta2 * vj.as_f64() + (1.0 - c.beta2) * gj * gj;
                        *mj = T::of(mn);
                        *vj = T::of(vn);
                        let upd = c.lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                        *pj = T::of(pj.as_f64() - upd);
                    }
                }
                None => {
                    for ((pj, mj), vj) in p.iter_mut().zip(m).zip(v) {
                        let mn = c.beta1 * mj.as_f64();
                        let vn = c.beta2 * vj.as_f64();
                        *mj = T::of(mn);
                        *vj = T::of(vn);
                        let upd = c.lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                        *pj = T::of(pj.as_f64() - upd);
                    }
                }
            }
        }
        Ok(())
    }
}
