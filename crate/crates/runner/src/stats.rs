//! Parameter counts and per-sample cost estimates.

use dualdiff::autograd::Graph;
use dualdiff::cnp::{self, LR_PREFIX};
use dualdiff::{Cnp, CnpConfig, Result, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub parameter_count: usize,
    /// Predictor parameters, LR encoder excluded.
    pub cnp_parameter_count: usize,
    pub lr_encoder_parameter_count: usize,
    pub adtd_parameter_count: usize,
    pub fi_parameter_count: usize,
    pub hr_size: usize,
    pub scale: usize,
    /// Forward FLOPs of one predictor call on a single `hr_size` image,
    /// LR encoder included. An estimate: convolutions, linear layers and
    /// attention count two per multiply-add, everything else one per output.
    pub flop_estimate: u64,
    /// Bytes of all intermediate values kept for backward in one training
    /// forward pass at batch size one (`f32`).
    pub peak_activation_estimate: usize,
}

pub fn model_stats(cfg: &CnpConfig, hr_size: usize, scale: usize) -> Result<ModelStats> {
    let params = cnp::init_params::<f32>(cfg, 0)?;
    let lr_size = hr_size / scale;
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, cfg.image_channels, hr_size, hr_size]));
    let lr = g.input(Tensor::zeros(&[1, cfg.image_channels, lr_size, lr_size]));
    let net = Cnp::new(cfg, &params);
    let feats = net.encode_lr(&mut g, lr)?;
    net.forward(&mut g, x, Some(feats), &[1])?;
    Ok(ModelStats {
        parameter_count: params.numel(),
        cnp_parameter_count: cnp::cnp_param_count(&params),
        lr_encoder_parameter_count: params.numel_with_prefix(LR_PREFIX),
        adtd_parameter_count: params.numel_with_prefix("dec.adtd."),
        fi_parameter_count: params.numel_with_prefix("dec.fi."),
        hr_size,
        scale,
        flop_estimate: g.flops(),
        peak_activation_estimate: g.activation_bytes(),
    })
}
