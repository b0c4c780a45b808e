use dualdiff::autograd::Graph;
use dualdiff::cnp::{self, Cnp, CnpConfig, LR_PREFIX};
use dualdiff::data::bicubic_resize;
use dualdiff::gradcheck::{check_gradients, tiny_dual_config};
use dualdiff::rng::{stream_rng, Stream};
use dualdiff::{DiffusionBatch, ImageTensor, NoiseSchedule, ParamStore, Tensor, ValueRange};

fn batch(cfg: &CnpConfig, s: &NoiseSchedule, side: usize) -> DiffusionBatch<f64> {
    let c = cfg.image_channels;
    let hr = Tensor::uniform(&[2, c, side, side], 0.9, &mut stream_rng(1, Stream::Analysis, 0));
    let hr = ImageTensor::new(hr, ValueRange::Symmetric).unwrap();
    let lr = bicubic_resize(&hr, side / 2, side / 2).unwrap();
    DiffusionBatch::new(hr, lr, 2, s, 3).unwrap()
}

fn loss_and_grads(cfg: &CnpConfig, params: &ParamStore<f64>, b: &DiffusionBatch<f64>, s: &NoiseSchedule) -> (f64, std::collections::BTreeMap<String, Tensor<f64>>) {
    let net = Cnp::new(cfg, params);
    let mut g = Graph::new();
    let loss = dualdiff::diffusion::training_loss(&mut g, &net, b, s).unwrap();
    let value = g.value(loss).data()[0];
    (value, g.backward(loss).unwrap().into_param_grads(params))
}

fn eval_loss(cfg: &CnpConfig, params: &ParamStore<f64>, b: &DiffusionBatch<f64>, s: &NoiseSchedule) -> dualdiff::Result<f64> {
    let net = Cnp::new(cfg, params);
    let mut g = Graph::inference();
    let loss = dualdiff::diffusion::training_loss(&mut g, &net, b, s)?;
    Ok(g.value(loss).data()[0])
}

#[test]
fn tiny_dual_predictor_gradients_match_finite_differences() {
    let cfg = tiny_dual_config();
    let s = NoiseSchedule::cosine(100, 0.008).unwrap();
    let mut params = cnp::init_params::<f64>(&cfg, 0).unwrap();
    params.randomize(0.5, &mut stream_rng(2, Stream::Analysis, 0));
    params.freeze_prefix(LR_PREFIX);
    assert!(cnp::cnp_param_count(&params) <= 500, "{}", cnp::cnp_param_count(&params));
    let b = batch(&cfg, &s, 8);
    let (_, grads) = loss_and_grads(&cfg, &params, &b, &s);
    let report = check_gradients(&params, &grads, 1e-4, 1e-3, |_, _| true, |p| eval_loss(&cfg, p, &b, &s)).unwrap();
    assert_eq!(report.checked, cnp::cnp_param_count(&params));
    for part in [".adtb0.", "dec.fi.", ".ws.", ".res0."] {
        assert!(report.tensors.iter().any(|n| n.contains(part)), "{part} not covered");
    }
    assert!(report.pass_fraction() >= 0.95, "{report:?}");
}

#[test]
fn three_by_three_kernels_and_lr_encoder_match_finite_differences() {
    let cfg = CnpConfig {
        base_channels: 4,
        channel_mults: vec![1, 2],
        res_blocks_per_level: 1,
        middle_res_blocks: 1,
        time_embed_dim: 4,
        adtb_heads: 2,
        lr_depth: 1,
        lr_growth: 2,
        ..CnpConfig::with_base(4)
    };
    let s = NoiseSchedule::cosine(100, 0.008).unwrap();
    let mut params = cnp::init_params::<f64>(&cfg, 1).unwrap();
    params.randomize(0.3, &mut stream_rng(3, Stream::Analysis, 0));
    let b = batch(&cfg, &s, 8);
    let (_, grads) = loss_and_grads(&cfg, &params, &b, &s);
    let mut k = 0usize;
    let report = check_gradients(
        &params,
        &grads,
        1e-4,
        1e-3,
        |_, i| {
            k += 1;
            i == 0 || k % 23 == 0
        },
        |p| eval_loss(&cfg, p, &b, &s),
    )
    .unwrap();
    assert_eq!(report.tensors.len(), params.len());
    assert!(report.pass_fraction() >= 0.95, "{report:?}");
}
