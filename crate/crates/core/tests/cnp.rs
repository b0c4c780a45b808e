use dualdiff::autograd::Graph;
use dualdiff::cnp::{self, adtb_forward, fi_fuse, time_embed, weighted_sum, Cnp, CnpConfig, DecoderMode, LR_PREFIX};
use dualdiff::rng::{stream_rng, Stream};
use dualdiff::{Error, ParamStore, Tensor};

fn tiny(mode: DecoderMode, fi: bool) -> CnpConfig {
    CnpConfig {
        base_channels: 8,
        channel_mults: vec![1, 2],
        res_blocks_per_level: 1,
        middle_res_blocks: 1,
        time_embed_dim: 16,
        adtb_heads: 2,
        decoder: mode,
        fi_enabled: fi,
        lr_depth: 1,
        lr_growth: 4,
        ..CnpConfig::with_base(8)
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut stream_rng(seed, Stream::Analysis, 0))
}

#[test]
fn time_embedding_at_zero_alternates() {
    let v = time_embed(0, 8).unwrap();
    assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert_eq!(time_embed(37, 8).unwrap().len(), 8);
    assert!(matches!(time_embed(3, 7), Err(Error::Config(_))));
}

#[test]
fn time_embeddings_are_distinct_over_all_steps() {
    for dim in [8, 64] {
        let embs: Vec<Vec<f64>> = (0..=100).map(|t| time_embed(t, dim).unwrap()).collect();
        for (i, a) in embs.iter().enumerate() {
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
            for b in embs.iter().skip(i + 1) {
                let gap = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(gap > 1e-6);
            }
        }
    }
}

#[test]
fn encoder_skip_shapes_at_paper_width() {
    let cfg = CnpConfig { decoder: DecoderMode::UnetOnly, fi_enabled: false, lr_depth: 0, ..CnpConfig::default() };
    let params = cnp::init_params::<f32>(&cfg, 0).unwrap();
    let net = Cnp::new(&cfg, &params);
    let mut g = Graph::inference();
    let x = g.input(Tensor::zeros(&[1, 3, 96, 96]));
    let temb = net.time_embedding(&mut g, &[10]).unwrap();
    let enc = net.encode(&mut g, x, None, temb).unwrap();
    let shapes: Vec<Vec<usize>> = enc.skips.iter().map(|&s| g.shape(s).to_vec()).collect();
    assert_eq!(shapes, vec![vec![1, 64, 96, 96], vec![1, 128, 48, 48], vec![1, 256, 24, 24], vec![1, 512, 12, 12]]);
    assert_eq!(g.shape(enc.bottleneck), &[1, 512, 6, 6]);
    assert!(g.value(enc.bottleneck).all_finite());
}

#[test]
fn encoder_rejects_indivisible_input_with_padding_hint() {
    let cfg = tiny(DecoderMode::Dual, true);
    let params = cnp::init_params::<f64>(&cfg, 0).unwrap();
    let net = Cnp::new(&cfg, &params);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 10, 12]));
    let err = net.forward(&mut g, x, None, &[1]).unwrap_err();
    assert!(err.to_string().contains("pad to 12x12"), "{err}");
}

#[test]
fn zero_lr_features_match_no_fusion() {
    let cfg = tiny(DecoderMode::Dual, true);
    let params = cnp::init_params::<f64>(&cfg, 1).unwrap();
    let net = Cnp::new(&cfg, &params);
    let xt = randn(&[2, 3, 8, 8], 1);
    let run = |feats: Option<Tensor<f64>>| {
        let mut g = Graph::new();
        let x = g.input(xt.clone());
        let f = feats.map(|f| g.input(f));
        let out = net.forward(&mut g, x, f, &[3, 70]).unwrap();
        g.value(out).clone()
    };
    let plain = run(None);
    let zeroed = run(Some(Tensor::zeros(&[2, 8, 2, 2])));
    assert_eq!(plain, zeroed);
    assert_eq!(plain.shape(), &[2, 3, 8, 8]);
}

#[test]
fn zero_input_gives_finite_output() {
    let cfg = tiny(DecoderMode::Dual, true);
    let params = cnp::init_params::<f32>(&cfg, 2).unwrap();
    let net = Cnp::new(&cfg, &params);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 8, 8]));
    let lr = g.input(Tensor::zeros(&[1, 3, 4, 4]));
    let feats = net.encode_lr(&mut g, lr).unwrap();
    let out = net.forward(&mut g, x, Some(feats), &[100]).unwrap();
    assert!(g.value(out).all_finite());
}

#[test]
fn middle_is_shape_preserving_and_identity_with_zeroed_convs() {
    let cfg = tiny(DecoderMode::UnetOnly, false);
    let mut params = cnp::init_params::<f64>(&cfg, 3).unwrap();
    let h0 = randn(&[2, 16, 2, 2], 3);
    let run = |params: &ParamStore<f64>| {
        let net = Cnp::new(&cfg, params);
        let mut g = Graph::new();
        let h = g.input(h0.clone());
        let temb = net.time_embedding(&mut g, &[5, 9]).unwrap();
        let out = net.middle(&mut g, h, temb).unwrap();
        g.value(out).clone()
    };
    let out = run(&params);
    assert_eq!(out.shape(), h0.shape());
    assert!(out.max_abs_diff(&h0) > 1e-3);
    for (name, t) in params.iter_mut() {
        if name.starts_with("mid.") && name.contains(".conv") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    assert_eq!(run(&params), h0);
}

#[test]
fn fresh_adtb_is_the_identity() {
    let mut cfg = tiny(DecoderMode::Dual, true);
    let params = cnp::init_params::<f64>(&cfg, 4).unwrap();
    for (h, w, limit) in [(4, 4, 10_000), (2, 3, 10_000), (16, 16, 64)] {
        cfg.attn_full_max_tokens = limit;
        cfg.attn_window = 8;
        let net = Cnp::new(&cfg, &params);
        let mut g = Graph::new();
        let tokens = randn(&[2, h * w, 8], 5);
        let x = g.input(tokens.clone());
        let temb = net.time_embedding(&mut g, &[1, 50]).unwrap().unwrap();
        let out = adtb_forward(&mut g, &params, &cfg, "dec.adtd.l0.adtb0", x, temb, (h, w)).unwrap();
        assert_eq!(g.value(out), &tokens);
    }
}

#[test]
fn adtb_changes_tokens_once_gates_open_and_keeps_shape() {
    let mut cfg = tiny(DecoderMode::Dual, true);
    cfg.attn_full_max_tokens = 16;
    cfg.attn_window = 4;
    let mut params = cnp::init_params::<f64>(&cfg, 4).unwrap();
    params.randomize(0.3, &mut stream_rng(1, Stream::Analysis, 9));
    let net = Cnp::new(&cfg, &params);
    let mut g = Graph::new();
    let tokens = randn(&[1, 64, 8], 6);
    let x = g.input(tokens.clone());
    let temb = net.time_embedding(&mut g, &[7]).unwrap().unwrap();
    let out = adtb_forward(&mut g, &params, &cfg, "dec.adtd.l0.adtb0", x, temb, (8, 8)).unwrap();
    assert_eq!(g.shape(out), &[1, 64, 8]);
    assert!(g.value(out).max_abs_diff(&tokens) > 1e-3);
    let bad = adtb_forward(&mut g, &params, &cfg, "dec.adtd.l0.adtb0", x, temb, (4, 4));
    assert!(matches!(bad, Err(Error::Dimension(_))));
}

#[test]
fn window_order_is_a_permutation() {
    let perm = cnp::window_order(8, 16, 4);
    assert_eq!(&perm[..5], &[0, 1, 2, 3, 16]);
    let mut sorted = perm.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..128).collect::<Vec<_>>());
}

#[test]
fn fi_with_zeroed_output_conv_averages() {
    let cfg = tiny(DecoderMode::Dual, true);
    let mut params = cnp::init_params::<f64>(&cfg, 5).unwrap();
    for (name, t) in params.iter_mut() {
        if name.starts_with("dec.fi.l0.") && name.contains(".fc2.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let a = randn(&[2, 8, 3, 3], 7);
    let b = randn(&[2, 8, 3, 3], 8);
    let mut g = Graph::new();
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let fused = fi_fuse(&mut g, &params, "dec.fi.l0", av, bv).unwrap();
    let expect = a.add(&b).unwrap().scale(0.5);
    assert!(g.value(fused).max_abs_diff(&expect) < 1e-15);
}

#[test]
fn fi_matches_straight_line_reimplementation() {
    let cfg = tiny(DecoderMode::Dual, true);
    let mut params = cnp::init_params::<f64>(&cfg, 6).unwrap();
    params.randomize(0.5, &mut stream_rng(2, Stream::Analysis, 0));
    let (b, c, h, w) = (2, 8, 2, 3);
    let t = randn(&[b, c, h, w], 9);
    let u = randn(&[b, c, h, w], 10);
    let mut g = Graph::new();
    let (tv, uv) = (g.input(t.clone()), g.input(u.clone()));
    let fused = fi_fuse(&mut g, &params, "dec.fi.l0", tv, uv).unwrap();

    let gate = |x: &Tensor<f64>, branch: &str| -> Vec<f64> {
        let p = |n: &str| params.get(&format!("dec.fi.l0.{branch}.{n}")).unwrap().data().to_vec();
        let (w1, b1, w2, b2) = (p("fc1.weight"), p("fc1.bias"), p("fc2.weight"), p("fc2.bias"));
        let r = b1.len();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let mut pooled = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for k in 0..h * w {
                    s += x.data()[(bi * c + ci) * h * w + k];
                }
                pooled[ci] = s / (h * w) as f64;
            }
            let mut hid = vec![0.0; r];
            for j in 0..r {
                let mut s = b1[j];
                for ci in 0..c {
                    s += w1[j * c + ci] * pooled[ci];
                }
                hid[j] = if s > 0.0 { s } else { 0.0 };
            }
            for ci in 0..c {
                let mut s = b2[ci];
                for j in 0..r {
                    s += w2[ci * r + j] * hid[j];
                }
                out[bi * c + ci] = 1.0 / (1.0 + (-s).exp());
            }
        }
        out
    };
    let gt = gate(&t, "t");
    let gu = gate(&u, "u");
    for i in 0..b * c * h * w {
        let bc = i / (h * w);
        let expect = gt[bc] * t.data()[i] + gu[bc] * u.data()[i];
        assert!((g.value(fused).data()[i] - expect).abs() < 1e-6);
    }
    let wrong = g.input(Tensor::zeros(&[b, c, h, h]));
    assert!(fi_fuse(&mut g, &params, "dec.fi.l0", tv, wrong).is_err());
}

#[test]
fn weighted_sum_passes_decoder_at_init_and_skip_when_swapped() {
    let cfg = tiny(DecoderMode::Dual, true);
    let mut params = cnp::init_params::<f64>(&cfg, 7).unwrap();
    let dec = randn(&[1, 8, 4, 4], 11);
    let skip = randn(&[1, 8, 4, 4], 12);
    let run = |params: &ParamStore<f64>| {
        let mut g = Graph::new();
        let (d, s) = (g.input(dec.clone()), g.input(skip.clone()));
        let out = weighted_sum(&mut g, params, "dec.adtd.l0.ws", d, s).unwrap();
        g.value(out).clone()
    };
    assert_eq!(run(&params), dec);
    params.insert("dec.adtd.l0.ws.w_dec", Tensor::scalar(0.0));
    params.insert("dec.adtd.l0.ws.w_skip", Tensor::scalar(1.0));
    let mut eye = vec![0.0; 64];
    (0..8).for_each(|i| eye[i * 9] = 1.0);
    params.insert("dec.adtd.l0.ws.proj.weight", Tensor::from_vec(&[8, 8, 1, 1], eye).unwrap());
    params.insert("dec.adtd.l0.ws.proj.bias", Tensor::zeros(&[8]));
    assert_eq!(run(&params), skip);

    let mut g = Graph::new();
    let (d, s) = (g.input(dec.clone()), g.input(Tensor::zeros(&[1, 8, 2, 2])));
    assert!(matches!(weighted_sum(&mut g, &params, "dec.adtd.l0.ws", d, s), Err(Error::Dimension(_))));
}

/// Fresh dual network without FI: the transformer branch reduces to the chain
/// of upsampling convolutions, so the output is the ConvBlock applied to the
/// U-Net branch plus that chain.
#[test]
fn fresh_dual_decoder_matches_hand_trace() {
    let cfg = tiny(DecoderMode::Dual, false);
    let params = cnp::init_params::<f64>(&cfg, 8).unwrap();
    let net = Cnp::new(&cfg, &params);
    let xt = randn(&[1, 3, 8, 8], 13);
    let mut g = Graph::new();
    let x = g.input(xt);
    let taps = net.forward_taps(&mut g, x, None, &[42], true).unwrap();
    let got = g.value(taps.eps).clone();

    let unet_cfg = CnpConfig { decoder: DecoderMode::UnetOnly, ..cfg.clone() };
    let mut unet_params = ParamStore::new();
    for (k, v) in params.iter() {
        if !k.starts_with("dec.adtd.") {
            unet_params.insert(k.clone(), v.clone());
        }
    }
    let unet = Cnp::new(&unet_cfg, &unet_params);
    let temb = unet.time_embedding(&mut g, &[42]).unwrap();
    let mut enc = unet.encode(&mut g, x, None, temb).unwrap();
    enc.bottleneck = unet.middle(&mut g, enc.bottleneck, temb).unwrap();
    let u = unet.decode_taps(&mut g, &enc, temb, false).unwrap().unet.unwrap();

    let mut a = enc.bottleneck;
    for i in [1, 0] {
        let up = g.upsample2x(a).unwrap();
        let w = g.param(&params, &format!("dec.adtd.l{i}.up.weight")).unwrap();
        let b = g.param(&params, &format!("dec.adtd.l{i}.up.bias")).unwrap();
        a = g.conv2d(up, w, Some(b), 1, 1).unwrap();
    }
    assert_eq!(g.value(taps.adtd.unwrap()), g.value(a));
    let sum = g.add(u, a).unwrap();
    let expect = net.tail(&mut g, sum).unwrap();
    assert_eq!(&got, g.value(expect));
}

#[test]
fn output_shape_matches_input_across_config_matrix() {
    for scale in [3, 4] {
        for (mode, fi) in [(DecoderMode::Dual, true), (DecoderMode::Dual, false), (DecoderMode::UnetOnly, false), (DecoderMode::AdtdOnly, false)] {
            let cfg = tiny(mode, fi);
            let params = cnp::init_params::<f32>(&cfg, 9).unwrap();
            let net = Cnp::new(&cfg, &params);
            let lr_side = 4;
            let hr_side = lr_side * scale;
            let mut g = Graph::new();
            let x = g.input(Tensor::randn(&[2, 3, hr_side, hr_side], &mut stream_rng(3, Stream::Noise, 0)));
            let lr = g.input(Tensor::randn(&[2, 3, lr_side, lr_side], &mut stream_rng(3, Stream::Noise, 1)));
            let feats = net.encode_lr(&mut g, lr).unwrap();
            let out = net.forward(&mut g, x, Some(feats), &[1, 100]).unwrap();
            assert_eq!(g.shape(out), &[2, 3, hr_side, hr_side], "scale {scale} {mode:?} fi={fi}");
        }
    }
    let bad = CnpConfig { decoder: DecoderMode::UnetOnly, fi_enabled: true, ..tiny(DecoderMode::Dual, true) };
    assert!(matches!(cnp::init_params::<f32>(&bad, 0), Err(Error::Config(_))));
}

#[test]
fn parameter_counts_follow_ablation_structure() {
    let count = |mode, fi| cnp::cnp_param_count(&cnp::init_params::<f32>(&tiny(mode, fi), 0).unwrap());
    let dual_fi = count(DecoderMode::Dual, true);
    let dual = count(DecoderMode::Dual, false);
    let unet = count(DecoderMode::UnetOnly, false);
    assert!(dual_fi > dual && dual > unet, "{dual_fi} {dual} {unet}");
    let unet_params = cnp::init_params::<f32>(&tiny(DecoderMode::UnetOnly, false), 0).unwrap();
    assert_eq!(unet_params.numel_with_prefix("dec.adtd."), 0);
    assert_eq!(unet_params.numel_with_prefix("dec.fi."), 0);
}

#[test]
fn hand_counted_parameters_base8_one_level() {
    let cfg = CnpConfig { channel_mults: vec![1], ..CnpConfig::with_base(8) };
    let params = cnp::init_params::<f32>(&cfg, 0).unwrap();
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let lin = |din: usize, dout: usize| din * dout + dout;
    let res = conv(8, 8, 3) + lin(32, 8) + 16 + conv(8, 8, 3) + 16;
    let time = lin(8, 32) + lin(32, 32);
    let head = conv(3, 8, 3);
    let enc = 2 * res + conv(8, 8, 3);
    let mid = 2 * res;
    let unet = conv(8, 8, 3) + 2 * res;
    let adtb = lin(32, 48) + lin(8, 24) + lin(8, 8) + lin(8, 32) + lin(32, 8);
    let adtd = conv(8, 8, 3) + 2 + conv(8, 8, 1) + adtb;
    let fi = 2 * (lin(8, 2) + lin(2, 8));
    let tail = conv(8, 8, 3) + 16 + conv(8, 3, 1);
    let total = time + head + enc + mid + unet + adtd + fi + tail;
    assert_eq!(total, 15313);
    assert_eq!(cnp::cnp_param_count(&params), total);
}

#[test]
fn zero_layer_config_has_only_head_and_tail() {
    let cfg = CnpConfig {
        channel_mults: vec![],
        middle_res_blocks: 0,
        decoder: DecoderMode::UnetOnly,
        fi_enabled: false,
        lr_depth: 0,
        ..CnpConfig::with_base(8)
    };
    let params = cnp::init_params::<f32>(&cfg, 0).unwrap();
    let head = 3 * 8 * 9 + 8;
    let tail = (8 * 8 * 9 + 8) + 16 + (8 * 3 + 3);
    assert_eq!(cnp::cnp_param_count(&params), head + tail);
    assert_eq!(params.numel_with_prefix(LR_PREFIX), 3 * 8 * 9 + 8);
    let net = Cnp::new(&cfg, &params);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 3, 5, 7]));
    let out = net.forward(&mut g, x, None, &[1]).unwrap();
    assert_eq!(g.shape(out), &[1, 3, 5, 7]);
}

#[test]
fn every_parameter_receives_gradient_in_full_dual_config() {
    let cfg = tiny(DecoderMode::Dual, true);
    let mut params = cnp::init_params::<f64>(&cfg, 10).unwrap();
    params.randomize(0.2, &mut stream_rng(4, Stream::Analysis, 0));
    let net = Cnp::new(&cfg, &params);
    let mut g = Graph::new();
    let x = g.input(randn(&[2, 3, 8, 8], 14));
    let lr = g.input(randn(&[2, 3, 4, 4], 15));
    let feats = net.encode_lr(&mut g, lr).unwrap();
    let out = net.forward(&mut g, x, Some(feats), &[3, 77]).unwrap();
    let loss = g.l1_loss(out, &randn(&[2, 3, 8, 8], 16)).unwrap();
    let grads = g.backward(loss).unwrap().into_param_grads(&params);
    assert_eq!(grads.len(), params.len());
    for (name, gr) in &grads {
        assert!(gr.data().iter().any(|v| *v != 0.0), "dead parameter {name}");
    }
}

#[test]
fn frozen_lr_encoder_gets_no_gradient() {
    let cfg = tiny(DecoderMode::Dual, true);
    let mut params = cnp::init_params::<f64>(&cfg, 11).unwrap();
    params.freeze_prefix(LR_PREFIX);
    let net = Cnp::new(&cfg, &params);
    let mut g = Graph::new();
    let x = g.input(randn(&[1, 3, 8, 8], 17));
    let lr = g.input(randn(&[1, 3, 4, 4], 18));
    let feats = net.encode_lr(&mut g, lr).unwrap();
    let out = net.forward(&mut g, x, Some(feats), &[3]).unwrap();
    let loss = g.sum_all(out);
    let grads = g.backward(loss).unwrap().into_param_grads(&params);
    assert!(grads.keys().all(|k| !k.starts_with(LR_PREFIX)));
    assert!(grads.contains_key("head.weight"));
}

#[test]
fn init_is_deterministic_in_seed() {
    let cfg = tiny(DecoderMode::Dual, true);
    let a = cnp::init_params::<f32>(&cfg, 5).unwrap();
    let b = cnp::init_params::<f32>(&cfg, 5).unwrap();
    let c = cnp::init_params::<f32>(&cfg, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
