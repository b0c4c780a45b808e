//! Named parameter storage.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor, plus the set of frozen prefixes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), frozen: BTreeSet::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Number of scalars under names starting with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// Exclude every parameter whose name starts with `prefix` from training.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.insert(prefix.into());
    }

    pub fn frozen_prefixes(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Overwrite every parameter under `prefix` with the matching entry of `other`.
    pub fn load_prefix(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in self.tensors.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            let src = other.get(name).ok_or_else(|| Error::Checkpoint(format!("`{name}` missing from source")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", src.shape(), t.shape())));
            }
            *t = src.clone();
            n += 1;
        }
        Ok(n)
    }

    /// Verify that `self` holds exactly the names and shapes of `reference`.
    pub fn check_closure(&self, reference: &ParamStore<T>) -> Result<()> {
        for (name, t) in &reference.tensors {
            match self.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
                Some(s) if s.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", s.shape(), t.shape())))
                }
                _ => {}
            }
        }
        if let Some(orphan) = self.tensors.keys().find(|k| !reference.tensors.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("orphan parameter `{orphan}`")));
        }
        Ok(())
    }

    /// Replace every entry with Gaussian noise of the given standard deviation.
    /// Used to move away from degenerate initializations in tests and diagnostics.
    pub fn randomize<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for t in self.tensors.values_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::randn(&shape, rng).scale(T::of(std));
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freezing_is_by_prefix() {
        let mut p = ParamStore::<f32>::new();
        p.insert("lr_encoder.lift.weight", Tensor::zeros(&[2]));
        p.insert("cnp.head.weight", Tensor::zeros(&[3]));
        p.freeze_prefix("lr_encoder.");
        assert!(p.is_frozen("lr_encoder.lift.weight"));
        assert!(!p.is_frozen("cnp.head.weight"));
        assert_eq!(p.numel(), 5);
        assert_eq!(p.numel_with_prefix("cnp."), 3);
    }

    #[test]
    fn closure_detects_orphans_and_shape_changes() {
        let mut a = ParamStore::<f32>::new();
        a.insert("w", Tensor::zeros(&[2, 2]));
        let mut b = a.clone();
        assert!(b.check_closure(&a).is_ok());
        b.insert("extra", Tensor::zeros(&[1]));
        assert!(b.check_closure(&a).is_err());
        let mut c = ParamStore::<f32>::new();
        c.insert("w", Tensor::zeros(&[4]));
        assert!(c.check_closure(&a).is_err());
    }
}
