//! Metric reports over directories of images matched by file stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dualdiff::data::{list_pngs, read_png};
use dualdiff::metrics::{confusion_metrics, psnr, ssim, MetricReport};
use dualdiff::{Error, Result};
use log::warn;
use serde::{Deserialize, Serialize};

/// Predicted and reference label maps, stored as 8-bit grayscale PNGs of class ids.
#[derive(Debug, Clone)]
pub struct LabelDirs {
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub num_classes: usize,
    pub oa_classes: usize,
    pub mean_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: MetricReport,
    pub per_image: BTreeMap<String, MetricReport>,
    /// Stems present in only one of the directories.
    pub unmatched: Vec<String>,
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let img = image::open(path)?.into_luma8();
    Ok(img.into_raw().into_iter().map(u32::from).collect())
}

fn matched(a: &BTreeMap<String, PathBuf>, b: &BTreeMap<String, PathBuf>) -> (Vec<String>, Vec<String>) {
    let both = a.keys().filter(|k| b.contains_key(*k)).cloned().collect();
    let only = a.keys().filter(|k| !b.contains_key(*k)).chain(b.keys().filter(|k| !a.contains_key(*k))).cloned().collect();
    (both, only)
}

pub fn evaluate_dirs(sr_dir: &Path, hr_dir: &Path, labels: Option<&LabelDirs>) -> Result<EvalReport> {
    let sr = list_pngs(sr_dir)?;
    let hr = list_pngs(hr_dir)?;
    let (stems, mut unmatched) = matched(&sr, &hr);
    for s in &unmatched {
        warn!("no counterpart for `{s}`");
    }
    if stems.is_empty() {
        return Err(Error::Data(format!("no common image stems in {} and {}", sr_dir.display(), hr_dir.display())));
    }
    let mut per_image = BTreeMap::new();
    for stem in &stems {
        let a = read_png::<f64>(&sr[stem])?;
        let b = read_png::<f64>(&hr[stem])?;
        let r = MetricReport { psnr_db: psnr(&a, &b, 1.0)?, ssim: ssim(&a, &b)?, ..Default::default() };
        per_image.insert(stem.clone(), r);
    }
    let n = per_image.len() as f64;
    let mut mean = MetricReport {
        psnr_db: per_image.values().map(|r| r.psnr_db).sum::<f64>() / n,
        ssim: per_image.values().map(|r| r.ssim).sum::<f64>() / n,
        ..Default::default()
    };
    if let Some(l) = labels {
        let pred = list_pngs(&l.pred)?;
        let gt = list_pngs(&l.gt)?;
        let (lstems, lonly) = matched(&pred, &gt);
        unmatched.extend(lonly.into_iter().map(|s| format!("labels:{s}")));
        if lstems.is_empty() {
            return Err(Error::Data("no common label map stems".into()));
        }
        let mut all_p = Vec::new();
        let mut all_g = Vec::new();
        for stem in &lstems {
            let p = read_labels(&pred[stem])?;
            let g = read_labels(&gt[stem])?;
            let c = confusion_metrics(&p, &g, l.num_classes, l.oa_classes, l.mean_classes)?;
            let entry = per_image.entry(stem.clone()).or_default();
            *entry = entry.clone().with_confusion(&c);
            all_p.extend(p);
            all_g.extend(g);
        }
        mean = mean.with_confusion(&confusion_metrics(&all_p, &all_g, l.num_classes, l.oa_classes, l.mean_classes)?);
    }
    Ok(EvalReport { mean, per_image, unmatched })
}
