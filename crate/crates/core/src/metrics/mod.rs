//! Full-reference image quality, segmentation confusion metrics and the
//! noise-distribution diagnostic.

mod adapter;
mod cdf;
mod confusion;
mod fidelity;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use adapter::{AdapterRegistry, MseAdapter, PerceptualMetric};
pub use cdf::{ks_distance, ks_to_standard_normal, noise_cdf_analysis, CdfSeries, NoiseAnalysis, SeriesStats};
pub use confusion::{confusion_metrics, ClassScores, ConfusionReport};
pub use fidelity::{psnr, ssim, ssim_with_range, PSNR_CAP_DB, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};

/// Named scalar metrics for one image or an aggregate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class: BTreeMap<String, ClassScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mf1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn with_confusion(mut self, c: &ConfusionReport) -> Self {
        self.per_class = c.per_class.iter().map(|s| (format!("class_{}", s.class), s.clone())).collect();
        self.oa = Some(c.oa);
        self.mf1 = Some(c.mf1);
        self.miou = Some(c.miou);
        self
    }
}
