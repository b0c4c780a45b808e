use dualdiff::autograd::{Graph, Var};
use dualdiff::cnp::{self, Cnp, CnpConfig, DecoderMode};
use dualdiff::data::{bicubic_resize, bicubic_upsample};
use dualdiff::diffusion::{forward_diffuse, forward_step, residual_decode, residual_encode, reverse_step, sample, training_loss};
use dualdiff::rng::{stream_rng, Stream};
use dualdiff::{DiffusionBatch, Error, ImageTensor, NoisePredictor, NoiseSchedule, Result, Tensor, ValueRange};
use proptest::prelude::*;

fn sched() -> NoiseSchedule {
    NoiseSchedule::cosine(100, 0.008).unwrap()
}

fn img(shape: [usize; 4], seed: u64, range: ValueRange, amp: f64) -> ImageTensor<f64> {
    let mut rng = stream_rng(seed, Stream::Analysis, 0);
    let t = Tensor::<f64>::uniform(&shape, amp, &mut rng);
    ImageTensor::new(t, range).unwrap()
}

fn hr_lr(seed: u64, lr_side: usize, scale: usize) -> (ImageTensor<f64>, ImageTensor<f64>) {
    let hr = img([1, 3, lr_side * scale, lr_side * scale], seed, ValueRange::Symmetric, 0.9);
    let lr = bicubic_resize(&hr, lr_side, lr_side).unwrap();
    (hr, lr)
}

#[test]
fn residual_of_exact_upsample_is_zero() {
    let lr = img([1, 3, 6, 6], 1, ValueRange::Symmetric, 0.5);
    let hr = bicubic_upsample(&lr, 3).unwrap();
    let r = residual_encode(&hr, &lr, 3).unwrap();
    assert!(r.data().iter().all(|&v| v == 0.0));
    assert_eq!(r.range(), ValueRange::Residual);
}

#[test]
fn residual_keeps_hr_shape() {
    let (hr, lr) = hr_lr(2, 32, 3);
    assert_eq!(residual_encode(&hr, &lr, 3).unwrap().shape(), [1, 3, 96, 96]);
    assert!(matches!(residual_encode(&hr, &lr, 4), Err(Error::Dimension(_))));
}

#[test]
fn residual_round_trip_reproduces_hr() {
    let (hr, lr) = hr_lr(3, 8, 4);
    let back = residual_decode(&residual_encode(&hr, &lr, 4).unwrap(), &lr, 4).unwrap();
    assert!(back.tensor().max_abs_diff(hr.tensor()) < 1e-6);
    assert_eq!(back.range(), ValueRange::Symmetric);
}

#[test]
fn residual_decode_of_zero_is_the_upsample_and_saturates() {
    let lr = img([1, 3, 4, 4], 4, ValueRange::Symmetric, 0.4);
    let zero = ImageTensor::zeros([1, 3, 12, 12], ValueRange::Residual);
    let up = bicubic_upsample(&lr, 3).unwrap();
    assert_eq!(residual_decode(&zero, &lr, 3).unwrap().tensor(), up.tensor());
    let big = ImageTensor::new(Tensor::full(&[1, 3, 12, 12], 10.0), ValueRange::Residual).unwrap();
    assert!(residual_decode(&big, &lr, 3).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn forward_diffuse_branches() {
    let s = sched();
    let x0 = img([2, 1, 3, 3], 5, ValueRange::Residual, 1.0);
    let eps = img([2, 1, 3, 3], 6, ValueRange::Unbounded, 2.0);
    let zero = ImageTensor::zeros([2, 1, 3, 3], ValueRange::Unbounded);
    let t = [10, 90];
    let no_noise = forward_diffuse(&x0, &t, &zero, &s).unwrap();
    let no_signal = forward_diffuse(&zero, &t, &eps, &s).unwrap();
    for i in 0..18 {
        let (a, b) = s.forward_kernel_params(t[i / 9]).unwrap();
        assert_eq!(no_noise.data()[i], a * x0.data()[i]);
        assert_eq!(no_signal.data()[i], b * eps.data()[i]);
    }
    assert!(matches!(forward_diffuse(&x0, &[0, 5], &eps, &s), Err(Error::Index { .. })));
    assert!(matches!(forward_diffuse(&x0, &[101, 5], &eps, &s), Err(Error::Index { .. })));
    assert!(forward_diffuse(&x0, &[5], &eps, &s).is_err());
}

#[test]
fn forward_diffuse_monte_carlo_moments() {
    let s = sched();
    let t = 37;
    let x0 = 0.6;
    let n = 10_000;
    let mut rng = stream_rng(11, Stream::Noise, 0);
    let x0img = ImageTensor::new(Tensor::full(&[n, 1, 1, 1], x0), ValueRange::Residual).unwrap();
    let eps = ImageTensor::new(Tensor::randn(&[n, 1, 1, 1], &mut rng), ValueRange::Unbounded).unwrap();
    let xt = forward_diffuse(&x0img, &vec![t; n], &eps, &s).unwrap();
    let mean = xt.data().iter().sum::<f64>() / n as f64;
    let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let abar = s.alpha_bar(t).unwrap();
    let sd = ((1.0 - abar) / n as f64).sqrt();
    assert!((mean - abar.sqrt() * x0).abs() < 3.0 * sd, "mean {mean}");
    assert!((var / (1.0 - abar) - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn iterated_single_steps_match_closed_form_kernel() {
    let s = sched();
    let k = 20;
    let n = 10_000;
    let x0 = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|i| 0.5 + i as f64 / 32.0).collect()).unwrap();
    let mut x = Tensor::stack_batch(&vec![x0.clone(); n]).unwrap();
    for t in 1..=k {
        let noise = Tensor::randn(x.shape(), &mut stream_rng(12, Stream::Noise, t as u64));
        x = forward_step(&x, t, &noise, &s).unwrap();
    }
    let (a, b) = s.forward_kernel_params(k).unwrap();
    for p in 0..16 {
        let vals: Vec<f64> = (0..n).map(|i| x.data()[i * 16 + p]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean / (a * x0.data()[p]) - 1.0).abs() < 0.05, "mean {mean} at {p}");
        assert!((var / (b * b) - 1.0).abs() < 0.05, "var {var} at {p}");
    }
}

#[test]
fn reverse_step_at_one_recovers_x0() {
    let s = sched();
    let x0 = img([1, 3, 4, 4], 13, ValueRange::Residual, 2.0);
    let eps = img([1, 3, 4, 4], 14, ValueRange::Unbounded, 3.0);
    let xt = forward_diffuse(&x0, &[1], &eps, &s).unwrap();
    let z = ImageTensor::zeros([1, 3, 4, 4], ValueRange::Unbounded);
    let back = reverse_step(&xt, 1, &eps, &s, &z).unwrap();
    assert!(back.tensor().max_abs_diff(x0.tensor()) < 1e-6);
}

#[test]
fn reverse_step_without_noise_rescales() {
    let s = sched();
    let xt = img([1, 1, 2, 2], 15, ValueRange::Unbounded, 3.0);
    let zero = ImageTensor::zeros([1, 1, 2, 2], ValueRange::Unbounded);
    for t in [1, 50, 100] {
        let out = reverse_step(&xt, t, &zero, &s, &zero).unwrap();
        let a = s.alpha(t).unwrap();
        for (o, x) in out.data().iter().zip(xt.data()) {
            assert!((o - x / a.sqrt()).abs() < 1e-12);
        }
    }
    assert!(matches!(reverse_step(&xt, 0, &zero, &s, &zero), Err(Error::Index { .. })));
}

/// Posterior mean of q(x_{t-1} | x_t, x0), written out directly.
fn posterior_mean(s: &NoiseSchedule, t: usize, xt: f64, x0: f64) -> f64 {
    let ab = s.alpha_bar(t).unwrap();
    let ab_prev = s.alpha_bar(t - 1).unwrap();
    let beta = s.beta(t).unwrap();
    let alpha = s.alpha(t).unwrap();
    ab_prev.sqrt() * beta / (1.0 - ab) * x0 + alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * xt
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scalar_chain_with_oracle_noise_returns_to_x0(x0 in -2.0f64..2.0, e in -3.0f64..3.0, start in 1usize..=100) {
        let s = sched();
        let one = |v: f64| ImageTensor::new(Tensor::full(&[1, 1, 1, 1], v), ValueRange::Unbounded).unwrap();
        let zero = one(0.0);
        let mut x = forward_diffuse(&one(x0), &[start], &one(e), &s).unwrap().data()[0];
        for t in (1..=start).rev() {
            let (a, b) = s.forward_kernel_params(t).unwrap();
            let oracle = (x - a * x0) / b;
            let next = reverse_step(&one(x), t, &one(oracle), &s, &zero).unwrap().data()[0];
            prop_assert!((next - posterior_mean(&s, t, x, x0)).abs() < 1e-9 * (1.0 + next.abs()));
            x = next;
        }
        prop_assert!((x - x0).abs() < 1e-5);
    }
}

struct Oracle {
    eps: Tensor<f64>,
    offset: f64,
}

impl NoisePredictor<f64> for Oracle {
    fn condition(&self, _: &mut Graph<f64>, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    fn predict(&self, g: &mut Graph<f64>, _: Var, _: Option<Var>, _: &[usize]) -> Result<Var> {
        let off = self.offset;
        Ok(g.leaf(self.eps.map(|v| v + off)))
    }
}

#[test]
fn loss_of_exact_and_offset_predictors() {
    let s = sched();
    let (hr, lr) = hr_lr(16, 4, 2);
    let batch = DiffusionBatch::new(hr, lr, 2, &s, 3).unwrap();
    for (offset, expect) in [(0.0, 0.0), (0.5, 0.5)] {
        let p = Oracle { eps: batch.eps.tensor().clone(), offset };
        let mut g = Graph::new();
        let loss = training_loss(&mut g, &p, &batch, &s).unwrap();
        assert!((g.value(loss).data()[0] - expect).abs() < 1e-12);
    }
}

#[test]
fn non_finite_prediction_reports_its_step() {
    let s = sched();
    let hr = ImageTensor::stack(&[hr_lr(17, 4, 2).0, hr_lr(18, 4, 2).0]).unwrap();
    let lr = bicubic_resize(&hr, 4, 4).unwrap();
    let batch = DiffusionBatch::new(hr, lr, 2, &s, 4).unwrap();
    let mut eps = batch.eps.tensor().clone();
    let last = eps.len() - 1;
    eps.data_mut()[last] = f64::NAN;
    let p = Oracle { eps, offset: 0.0 };
    let mut g = Graph::new();
    match training_loss(&mut g, &p, &batch, &s) {
        Err(Error::Numeric { t, .. }) => assert_eq!(t, batch.t[1]),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn batch_invariants_hold_and_are_seeded() {
    let s = sched();
    let hr = ImageTensor::stack(&(0..8).map(|i| hr_lr(20 + i, 4, 3).0).collect::<Vec<_>>()).unwrap();
    let lr = bicubic_resize(&hr, 4, 4).unwrap();
    let a = DiffusionBatch::new(hr.clone(), lr.clone(), 3, &s, 9).unwrap();
    let b = DiffusionBatch::new(hr.clone(), lr.clone(), 3, &s, 9).unwrap();
    let c = DiffusionBatch::new(hr.clone(), lr.clone(), 3, &s, 10).unwrap();
    assert_eq!(a.eps, b.eps);
    assert_eq!(a.t, b.t);
    assert_ne!(a.eps, c.eps);
    assert!(a.t.iter().all(|&t| (1..=100).contains(&t)));
    let up = bicubic_upsample(&lr, 3).unwrap();
    let expect = hr.tensor().sub(up.tensor()).unwrap();
    assert!(a.x0.tensor().max_abs_diff(&expect) < 1e-6);
}

fn tiny_cfg() -> CnpConfig {
    CnpConfig {
        base_channels: 4,
        channel_mults: vec![1, 2],
        res_blocks_per_level: 1,
        middle_res_blocks: 1,
        time_embed_dim: 8,
        adtb_heads: 2,
        lr_depth: 1,
        lr_growth: 2,
        ..CnpConfig::with_base(4)
    }
}

#[test]
fn cnp_loss_matches_straight_line_l1() {
    let s = sched();
    let cfg = tiny_cfg();
    let params = cnp::init_params::<f64>(&cfg, 1).unwrap();
    let net = Cnp::new(&cfg, &params);
    let (hr, lr) = hr_lr(30, 4, 2);
    let batch = DiffusionBatch::new(hr, lr, 2, &s, 5).unwrap();
    let mut g = Graph::new();
    let loss = training_loss(&mut g, &net, &batch, &s).unwrap();

    let (a, b) = s.forward_kernel_params(batch.t[0]).unwrap();
    let xt: Vec<f64> = batch.x0.data().iter().zip(batch.eps.data()).map(|(x, e)| a * x + b * e).collect();
    let mut h = Graph::new();
    let xv = h.input(Tensor::from_vec(&batch.x0.shape(), xt).unwrap());
    let lv = h.input(batch.lr.tensor().clone());
    let feats = net.encode_lr(&mut h, lv).unwrap();
    let pred = net.forward(&mut h, xv, Some(feats), &batch.t).unwrap();
    let n = batch.eps.data().len() as f64;
    let manual = h.value(pred).data().iter().zip(batch.eps.data()).map(|(p, e)| (p - e).abs()).sum::<f64>() / n;
    assert!((g.value(loss).data()[0] - manual).abs() < 1e-6);
}

#[test]
fn sampling_is_deterministic_and_upscales() {
    let s = NoiseSchedule::cosine(10, 0.008).unwrap();
    let cfg = CnpConfig { decoder: DecoderMode::Dual, ..tiny_cfg() };
    let params = cnp::init_params::<f32>(&cfg, 2).unwrap();
    let net = Cnp::new(&cfg, &params);
    let lr = img([1, 3, 4, 4], 31, ValueRange::Symmetric, 0.8).cast::<f32>();
    let a = sample(&net, &lr, &s, 3, 7).unwrap();
    let b = sample(&net, &lr, &s, 3, 7).unwrap();
    let c = sample(&net, &lr, &s, 3, 8).unwrap();
    assert_eq!(a.shape(), [1, 3, 12, 12]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

struct Exploding;

impl NoisePredictor<f64> for Exploding {
    fn condition(&self, _: &mut Graph<f64>, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    fn predict(&self, g: &mut Graph<f64>, x: Var, _: Option<Var>, t: &[usize]) -> Result<Var> {
        let v = if t[0] == 4 { f64::INFINITY } else { 0.0 };
        Ok(g.input(Tensor::full(g.shape(x), v)))
    }
}

#[test]
fn sampling_reports_failing_step() {
    let s = NoiseSchedule::cosine(10, 0.008).unwrap();
    let lr = img([1, 1, 2, 2], 32, ValueRange::Symmetric, 0.5);
    match sample(&Exploding, &lr, &s, 2, 0) {
        Err(Error::Numeric { t, .. }) => assert_eq!(t, 4),
        other => panic!("expected numeric error, got {other:?}"),
    }
}
