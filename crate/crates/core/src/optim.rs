//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (k, t) in p.iter() {
                z.insert(k, Tensor::zeros(t.shape()));
            }
            z
        };
        AdamW { config, step: 0, m: zeros(params), v: zeros(params) }
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Ok(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape())));
            }
            let m = self.m.get_mut(name)?.data_mut();
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            }
            let v = self.v.get_mut(name)?.data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            }
            let m = self.m.get(name)?.data();
            let v = self.v.get(name)?.data();
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pi -= c.lr * c.weight_decay * *pi;
                *pi -= c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Moments under `opt.m.*` / `opt.v.*` names, for checkpointing.
    pub fn state(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (k, t) in self.m.iter() {
            s.insert(format!("opt.m.{k}"), t.clone());
        }
        for (k, t) in self.v.iter() {
            s.insert(format!("opt.v.{k}"), t.clone());
        }
        s.insert("opt.step", Tensor::scalar(self.step as f64));
        s
    }

    pub fn restore(config: AdamWConfig, params: &ParamStore, state: &ParamStore) -> Result<Self> {
        let mut opt = AdamW::new(config, params);
        for (k, _) in params.iter() {
            *opt.m.get_mut(k)? = state.get(&format!("opt.m.{k}"))?.clone();
            *opt.v.get_mut(k)? = state.get(&format!("opt.v.{k}"))?.clone();
        }
        opt.step = state.get("opt.step")?.item() as u64;
        Ok(opt)
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &ParamStore) -> f64 {
    grads.norm()
}

/// Rescale so the global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let n = grads.norm();
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(vec![1.0, -1.0]));
        let mut g = ParamStore::new();
        g.insert("w", Tensor::from_vec(vec![0.5, -2.0]));
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.update(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = ParamStore::new();
        g.insert("w", Tensor::from_vec(vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }
}
