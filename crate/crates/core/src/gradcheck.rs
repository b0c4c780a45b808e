//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Differences below this are treated as agreement regardless of scale.
pub const ABS_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub worst_name: String,
    pub worst_rel: f64,
    /// Parameter tensors that had at least one entry checked.
    pub tensors: Vec<String>,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 0.0;
        }
        self.passed as f64 / self.checked as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Compare `grads` against `(loss(p + h) - loss(p - h)) / 2h` for every entry
/// selected by `select(name, index)`.
pub fn check_gradients(
    params: &ParamStore<f64>,
    grads: &BTreeMap<String, Tensor<f64>>,
    h: f64,
    tol: f64,
    mut select: impl FnMut(&str, usize) -> bool,
    loss: impl Fn(&ParamStore<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport { checked: 0, passed: 0, worst_name: String::new(), worst_rel: 0.0, tensors: Vec::new() };
    let mut probe = params.clone();
    for (name, g) in grads {
        let mut touched = false;
        for i in 0..g.len() {
            if !select(name, i) {
                continue;
            }
            let orig = probe.get(name).expect("gradient names come from the store").data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = relative_error(g.data()[i], numeric);
            report.checked += 1;
            if rel <= tol {
                report.passed += 1;
            }
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_name = format!("{name}[{i}]");
            }
            touched = true;
        }
        if touched {
            report.tensors.push(name.clone());
        }
    }
    Ok(report)
}

/// Smallest dual-decoder layout that still exercises every block type:
/// one level, one head, pointwise kernels and a single-channel image.
pub fn tiny_dual_config() -> crate::cnp::CnpConfig {
    crate::cnp::CnpConfig {
        image_channels: 1,
        base_channels: 4,
        channel_mults: vec![1],
        res_blocks_per_level: 1,
        middle_res_blocks: 0,
        kernel_size: 1,
        time_embed_dim: 2,
        adtb_heads: 1,
        adtb_per_level: 1,
        ff_expansion: 1,
        lr_depth: 0,
        lr_growth: 1,
        ..crate::cnp::CnpConfig::with_base(4)
    }
}
