use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Empirical CDF of one sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfSeries {
    pub name: String,
    pub sorted_samples: Vec<f64>,
    pub cdf: Vec<f64>,
}

impl CdfSeries {
    pub fn new(name: impl Into<String>, samples: &[f64]) -> Result<Self> {
        let name = name.into();
        if samples.is_empty() {
            return Err(Error::Data(format!("series `{name}` is empty")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("series `{name}` has non-finite samples")));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let cdf = (1..=sorted.len()).map(|i| i as f64 / n).collect();
        Ok(Self { name, sorted_samples: sorted, cdf })
    }

    pub fn len(&self) -> usize {
        self.sorted_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_samples.is_empty()
    }

    pub fn is_monotone(&self) -> bool {
        self.sorted_samples.windows(2).all(|w| w[0] <= w[1]) && self.cdf.windows(2).all(|w| w[0] <= w[1])
    }

    /// Two-column `value cdf` table, one row per sample.
    pub fn to_table(&self) -> String {
        let mut s = format!("# {}\n# value\tcdf\n", self.name);
        for (v, c) in self.sorted_samples.iter().zip(&self.cdf) {
            writeln!(s, "{v:.9e}\t{c:.9e}").unwrap();
        }
        s
    }
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_distance(a: &CdfSeries, b: &CdfSeries) -> f64 {
    let (x, y) = (&a.sorted_samples, &b.sorted_samples);
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / nx - j as f64 / ny).abs());
    }
    d
}

/// One-sample KS statistic against the standard normal CDF.
pub fn ks_to_standard_normal(s: &CdfSeries) -> f64 {
    let normal = Normal::standard();
    let n = s.len() as f64;
    s.sorted_samples
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal.cdf(v);
            ((i as f64 + 1.0) / n - f).abs().max((f - i as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub ks_to_standard_normal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAnalysis {
    pub series: Vec<CdfSeries>,
    pub stats: Vec<SeriesStats>,
    /// `(a, b, KS(a, b))` for every unordered pair.
    pub pairwise_ks: Vec<(String, String, f64)>,
}

impl NoiseAnalysis {
    pub fn series(&self, name: &str) -> Option<&CdfSeries> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn stats(&self, name: &str) -> Option<&SeriesStats> {
        self.stats.iter().find(|s| s.name == name)
    }
}

/// Empirical CDFs, moments and KS distances of labeled sample sets.
pub fn noise_cdf_analysis(series: &BTreeMap<String, Vec<f64>>) -> Result<NoiseAnalysis> {
    if series.is_empty() {
        return Err(Error::Data("no series supplied".into()));
    }
    let cdfs = series.iter().map(|(k, v)| CdfSeries::new(k.clone(), v)).collect::<Result<Vec<_>>>()?;
    let stats = cdfs
        .iter()
        .map(|c| {
            let n = c.len() as f64;
            let mean = c.sorted_samples.iter().sum::<f64>() / n;
            let variance = c.sorted_samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            SeriesStats { name: c.name.clone(), n: c.len(), mean, variance, ks_to_standard_normal: ks_to_standard_normal(c) }
        })
        .collect();
    let mut pairwise_ks = Vec::new();
    for i in 0..cdfs.len() {
        for j in i + 1..cdfs.len() {
            pairwise_ks.push((cdfs[i].name.clone(), cdfs[j].name.clone(), ks_distance(&cdfs[i], &cdfs[j])));
        }
    }
    Ok(NoiseAnalysis { series: cdfs, stats, pairwise_ks })
}
