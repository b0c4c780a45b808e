//! Parameter initialization and named-layer helpers shared by the networks.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const GN_EPS: f64 = 1e-5;
pub(crate) const LN_EPS: f64 = 1e-6;

/// Creates parameters with fan-in scaled uniform weights.
pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
}

impl<T: Scalar> Init<'_, T> {
    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        self.store.insert(format!("{name}.weight"), Tensor::uniform(&[cout, cin, k, k], bound, self.rng));
        self.store.insert(format!("{name}.bias"), Tensor::uniform(&[cout], bound, self.rng));
    }

    pub fn linear(&mut self, name: &str, dout: usize, din: usize) {
        let bound = 1.0 / (din as f64).sqrt();
        self.store.insert(format!("{name}.weight"), Tensor::uniform(&[dout, din], bound, self.rng));
        self.store.insert(format!("{name}.bias"), Tensor::uniform(&[dout], bound, self.rng));
    }

    pub fn norm(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        self.store.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) {
        self.store.insert(name.to_string(), Tensor::full(shape, T::of(v)));
    }
}

pub(crate) fn conv<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(b), stride, k / 2)
}

pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    g.linear(x, w, Some(b))
}

pub(crate) fn group_norm<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var, groups: usize) -> Result<Var> {
    let gamma = g.param(p, &format!("{name}.gamma"))?;
    let beta = g.param(p, &format!("{name}.beta"))?;
    g.group_norm(x, gamma, beta, groups, GN_EPS)
}
