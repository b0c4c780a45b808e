//! Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: None }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(config_err(format!("invalid Adam settings {self:?}")));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(config_err("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// Optimizer state: step count and first/second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    /// Global L2 norm of a gradient set.
    pub fn grad_norm(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
        grads.values().flat_map(|g| g.data().iter()).map(|&x| x.f64() * x.f64()).sum::<f64>().sqrt()
    }

    /// Apply one update. Parameters without a gradient entry are left alone.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut factor = 1.0;
        if let Some(clip) = self.cfg.grad_clip {
            let norm = Self::grad_norm(grads);
            if norm > clip {
                factor = clip / norm;
            }
        }
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::of(self.cfg.lr / c1);
        let c2_sqrt = T::of(c2.sqrt());
        let (b1t, b2t, eps, f) = (T::of(b1), T::of(b2), T::of(self.cfg.eps), T::of(factor));
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(config_err(format!("gradient shape mismatch for `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gv = gv * f;
                *mv = b1t * *mv + (T::one() - b1t) * gv;
                *vv = b2t * *vv + (T::one() - b2t) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap());
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        opt.update(&mut ps, &grads).unwrap();
        let w = ps.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("x", Tensor::scalar(5.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        for _ in 0..500 {
            let x = ps.get("x").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::scalar(2.0 * (x - 2.0)));
            opt.update(&mut ps, &grads).unwrap();
        }
        assert!((ps.get("x").unwrap().data()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_scales_the_gradient() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        assert!((Adam::grad_norm(&grads) - 5.0).abs() < 1e-12);
        let mut ps = ParamStore::<f64>::new();
        ps.insert("a", Tensor::zeros(&[2]));
        let cfg = AdamConfig { grad_clip: Some(1.0), ..Default::default() };
        let mut opt = Adam::new(cfg).unwrap();
        opt.update(&mut ps, &grads).unwrap();
        let m = opt.m["a"].data();
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-12 && (m[1] - 0.1 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_settings() {
        assert!(Adam::<f64>::new(AdamConfig { lr: 0.0, ..Default::default() }).is_err());
        assert!(Adam::<f64>::new(AdamConfig { grad_clip: Some(-1.0), ..Default::default() }).is_err());
    }
}
