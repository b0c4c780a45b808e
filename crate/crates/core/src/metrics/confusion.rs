use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    /// Precision `TP / (TP + FP)`.
    pub precision: f64,
    /// Recall `TP / (TP + FN)`.
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// False when the class appears in neither prediction nor ground truth.
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub per_class: Vec<ClassScores>,
    pub oa: f64,
    pub mf1: f64,
    pub miou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest confusion metrics of a label map.
///
/// OA counts pixels whose ground truth is one of the first `oa_classes`
/// classes; mF1 and mIoU average over the first `mean_classes` classes,
/// skipping classes absent from both maps.
pub fn confusion_metrics(pred: &[u32], gt: &[u32], num_classes: usize, oa_classes: usize, mean_classes: usize) -> Result<ConfusionReport> {
    if pred.len() != gt.len() {
        return Err(dim_err(format!("prediction has {} labels, ground truth {}", pred.len(), gt.len())));
    }
    if mean_classes > oa_classes || oa_classes > num_classes || mean_classes == 0 {
        return Err(config_err(format!(
            "need 0 < mean_classes ({mean_classes}) <= oa_classes ({oa_classes}) <= num_classes ({num_classes})"
        )));
    }
    let mut matrix = vec![0u64; num_classes * num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::Data(format!("label {} out of range [0, {num_classes})", p.max(g))));
        }
        matrix[g * num_classes + p] += 1;
    }
    let total = pred.len() as u64;
    let per_class: Vec<ClassScores> = (0..num_classes)
        .map(|c| {
            let tp = matrix[c * num_classes + c];
            let row: u64 = (0..num_classes).map(|p| matrix[c * num_classes + p]).sum();
            let col: u64 = (0..num_classes).map(|g| matrix[g * num_classes + c]).sum();
            let (fp, fn_) = (col - tp, row - tp);
            let tn = total - tp - fp - fn_;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassScores { class: c, tp, fp, fn_, tn, precision, recall, f1, iou: ratio(tp, tp + fp + fn_), present: tp + fp + fn_ > 0 }
        })
        .collect();
    let oa_total: u64 = (0..oa_classes).map(|g| (0..num_classes).map(|p| matrix[g * num_classes + p]).sum::<u64>()).sum();
    let oa_correct: u64 = (0..oa_classes).map(|c| matrix[c * num_classes + c]).sum();
    let used: Vec<&ClassScores> = per_class[..mean_classes].iter().filter(|s| s.present).collect();
    let mean = |f: fn(&ClassScores) -> f64| if used.is_empty() { 0.0 } else { used.iter().map(|s| f(s)).sum::<f64>() / used.len() as f64 };
    Ok(ConfusionReport { oa: ratio(oa_correct, oa_total), mf1: mean(|s| s.f1), miou: mean(|s| s.iou), per_class })
}
