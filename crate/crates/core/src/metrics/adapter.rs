use std::collections::BTreeMap;

use crate::error::{config_err, Result};
use crate::image::ImageTensor;

/// A full-reference metric plugged in by name (LPIPS, FID, ...).
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> Result<f64>;
}

/// Mean squared error; stands in for learned metrics in wiring tests.
#[derive(Debug, Default, Clone, Copy)]
pub struct MseAdapter;

impl PerceptualMetric for MseAdapter {
    fn name(&self) -> &str {
        "mse"
    }

    fn evaluate(&self, a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> Result<f64> {
        a.tensor().same_shape(b.tensor())?;
        let n = a.data().len() as f64;
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
    }
}

pub struct AdapterRegistry {
    adapters: BTreeMap<String, Box<dyn PerceptualMetric>>,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        let mut r = Self { adapters: BTreeMap::new() };
        r.register(Box::new(MseAdapter));
        r
    }
}

impl AdapterRegistry {
    pub fn empty() -> Self {
        Self { adapters: BTreeMap::new() }
    }

    pub fn register(&mut self, adapter: Box<dyn PerceptualMetric>) {
        self.adapters.insert(adapter.name().to_string(), adapter);
    }

    pub fn names(&self) -> Vec<&str> {
        self.adapters.keys().map(String::as_str).collect()
    }

    pub fn evaluate(&self, name: &str, a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> Result<f64> {
        let adapter = self
            .adapters
            .get(name)
            .ok_or_else(|| config_err(format!("no perceptual adapter `{name}`; available: {}", self.names().join(", "))))?;
        adapter.evaluate(a, b)
    }
}
