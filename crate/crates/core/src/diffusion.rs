//! Residual-space forward diffusion, the L1 noise-prediction loss and
//! ancestral sampling.

use crate::autograd::{Graph, Var};
use crate::cnp::Cnp;
use crate::data::bicubic_upsample;
use crate::error::{dim_err, Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

use rand::Rng as _;

/// Anything that predicts the injected noise from `(x_t, LR conditioning, t)`.
pub trait NoisePredictor<T: Scalar> {
    /// Conditioning features derived from the normalized LR image.
    fn condition(&self, g: &mut Graph<T>, lr: Var) -> Result<Option<Var>>;

    fn predict(&self, g: &mut Graph<T>, x_t: Var, cond: Option<Var>, t: &[usize]) -> Result<Var>;
}

impl<T: Scalar> NoisePredictor<T> for Cnp<'_, T> {
    fn condition(&self, g: &mut Graph<T>, lr: Var) -> Result<Option<Var>> {
        self.encode_lr(g, lr).map(Some)
    }

    fn predict(&self, g: &mut Graph<T>, x_t: Var, cond: Option<Var>, t: &[usize]) -> Result<Var> {
        self.forward(g, x_t, cond, t)
    }
}

fn check_scaled(hr: (usize, usize, usize, usize), lr: (usize, usize, usize, usize), scale: usize) -> Result<()> {
    if hr.0 != lr.0 || hr.1 != lr.1 || hr.2 != lr.2 * scale || hr.3 != lr.3 * scale {
        return Err(dim_err(format!("HR {hr:?} is not {scale}x LR {lr:?}")));
    }
    Ok(())
}

/// `hr - bicubic_upsample(lr)`.
pub fn residual_encode<T: Scalar>(hr: &ImageTensor<T>, lr: &ImageTensor<T>, scale: usize) -> Result<ImageTensor<T>> {
    check_scaled(hr.dims(), lr.dims(), scale)?;
    let up = bicubic_upsample(lr, scale)?;
    ImageTensor::new(hr.tensor().sub(up.tensor())?, ValueRange::Residual)
}

/// `x0 + bicubic_upsample(lr)`, clipped to `[-1, 1]`.
pub fn residual_decode<T: Scalar>(x0: &ImageTensor<T>, lr: &ImageTensor<T>, scale: usize) -> Result<ImageTensor<T>> {
    check_scaled(x0.dims(), lr.dims(), scale)?;
    let up = bicubic_upsample(lr, scale)?;
    let mut out = ImageTensor::new(x0.tensor().add(up.tensor())?, ValueRange::Symmetric)?;
    out.clip_to_range();
    Ok(out)
}

fn per_sample<T: Scalar>(x: &Tensor<T>, coef: &[(T, T)], other: &Tensor<T>) -> Result<Tensor<T>> {
    x.same_shape(other)?;
    let b = x.shape()[0];
    if coef.len() != b {
        return Err(dim_err(format!("{} time steps for a batch of {b}", coef.len())));
    }
    let per = x.len() / b;
    let data = x
        .data()
        .iter()
        .zip(other.data())
        .enumerate()
        .map(|(i, (&a, &e))| {
            let (ca, ce) = coef[i / per];
            ca * a + ce * e
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` with a step per batch item.
pub fn forward_diffuse<T: Scalar>(x0: &ImageTensor<T>, t: &[usize], eps: &ImageTensor<T>, sched: &NoiseSchedule) -> Result<ImageTensor<T>> {
    let coef = t
        .iter()
        .map(|&ti| {
            sched.beta(ti)?;
            let (a, b) = sched.forward_kernel_params(ti)?;
            Ok((T::of(a), T::of(b)))
        })
        .collect::<Result<Vec<_>>>()?;
    ImageTensor::new(per_sample(x0.tensor(), &coef, eps.tensor())?, ValueRange::Unbounded)
}

/// One forward transition `x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) noise`.
pub fn forward_step<T: Scalar>(x_prev: &Tensor<T>, t: usize, noise: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let a = sched.alpha(t)?;
    let coef = vec![(T::of(a.sqrt()), T::of((1.0 - a).sqrt())); x_prev.shape()[0]];
    per_sample(x_prev, &coef, noise)
}

/// `x_{t-1} = (x_t - eps_coef * eps_hat) / sqrt(alpha_t) + sigma_t z`.
pub fn reverse_step<T: Scalar>(
    x_t: &ImageTensor<T>,
    t: usize,
    eps_hat: &ImageTensor<T>,
    sched: &NoiseSchedule,
    z: &ImageTensor<T>,
) -> Result<ImageTensor<T>> {
    let out = reverse_step_tensor(x_t.tensor(), t, eps_hat.tensor(), sched, z.tensor())?;
    ImageTensor::new(out, ValueRange::Unbounded).map_err(|_| Error::Numeric { t, msg: "reverse step produced non-finite values".into() })
}

fn reverse_step_tensor<T: Scalar>(x_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>, sched: &NoiseSchedule, z: &Tensor<T>) -> Result<Tensor<T>> {
    let rc = sched.reverse_coefficients(t)?;
    x_t.same_shape(eps_hat)?;
    x_t.same_shape(z)?;
    let (r, e, s) = (T::of(rc.recip_sqrt_alpha), T::of(rc.eps_coef), T::of(rc.sigma));
    let data = x_t.data().iter().zip(eps_hat.data()).zip(z.data()).map(|((&x, &n), &zv)| r * (x - e * n) + s * zv).collect();
    Tensor::from_vec(x_t.shape(), data)
}

/// One training example set: residual target, conditioning and sampled noise.
#[derive(Debug, Clone)]
pub struct DiffusionBatch<T> {
    pub x0: ImageTensor<T>,
    pub lr: ImageTensor<T>,
    pub hr: ImageTensor<T>,
    pub t: Vec<usize>,
    pub eps: ImageTensor<T>,
    pub seed: u64,
}

impl<T: Scalar> DiffusionBatch<T> {
    /// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` from streams keyed by `seed`.
    pub fn new(hr: ImageTensor<T>, lr: ImageTensor<T>, scale: usize, sched: &NoiseSchedule, seed: u64) -> Result<Self> {
        let x0 = residual_encode(&hr, &lr, scale)?;
        let b = hr.dims().0;
        let mut trng = stream_rng(seed, Stream::Timestep, 0);
        let t = (0..b).map(|_| trng.random_range(1..=sched.steps())).collect();
        let mut nrng = stream_rng(seed, Stream::Noise, 0);
        let eps = ImageTensor::new(Tensor::randn(&x0.shape(), &mut nrng), ValueRange::Unbounded)?;
        Ok(Self { x0, lr, hr, t, eps, seed })
    }

    pub fn x_t(&self, sched: &NoiseSchedule) -> Result<ImageTensor<T>> {
        forward_diffuse(&self.x0, &self.t, &self.eps, sched)
    }
}

fn first_non_finite<T: Scalar>(x: &Tensor<T>) -> Option<usize> {
    let b = x.shape()[0];
    let per = x.len() / b.max(1);
    x.data().iter().position(|v| !v.is_finite()).map(|i| i / per)
}

/// Mean absolute error between the predicted and the injected noise.
pub fn training_loss<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    predictor: &P,
    batch: &DiffusionBatch<T>,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let x_t = batch.x_t(sched)?;
    let xv = g.input(x_t.into_tensor());
    let lrv = g.input(batch.lr.tensor().clone());
    let cond = predictor.condition(g, lrv)?;
    let pred = predictor.predict(g, xv, cond, &batch.t)?;
    if let Some(i) = first_non_finite(g.value(pred)) {
        return Err(Error::Numeric { t: batch.t[i], msg: format!("non-finite noise prediction for batch item {i}") });
    }
    g.l1_loss(pred, batch.eps.tensor())
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to the SR image.
pub fn sample<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    lr: &ImageTensor<T>,
    sched: &NoiseSchedule,
    scale: usize,
    rng_seed: u64,
) -> Result<ImageTensor<T>> {
    let (b, c, h, w) = lr.dims();
    let shape = [b, c, h * scale, w * scale];
    let cond = {
        let mut g = Graph::inference();
        let lrv = g.input(lr.tensor().clone());
        predictor.condition(&mut g, lrv)?.map(|v| g.value(v).clone())
    };
    let mut x = Tensor::randn(&shape, &mut stream_rng(rng_seed, Stream::Sampler, 0));
    for t in (1..=sched.steps()).rev() {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let cv = cond.as_ref().map(|c| g.input(c.clone()));
        let ts = vec![t; b];
        let eps = predictor.predict(&mut g, xv, cv, &ts)?;
        if g.value(eps).shape() != shape {
            return Err(dim_err(format!("predictor returned {:?} for {shape:?}", g.shape(eps))));
        }
        if first_non_finite(g.value(eps)).is_some() {
            return Err(Error::Numeric { t, msg: "non-finite noise prediction".into() });
        }
        let z = if t > 1 { Tensor::randn(&shape, &mut stream_rng(rng_seed, Stream::Sampler, t as u64)) } else { Tensor::zeros(&shape) };
        x = reverse_step_tensor(&x, t, g.value(eps), sched, &z)?;
        if !x.all_finite() {
            return Err(Error::Numeric { t, msg: "non-finite intermediate sample".into() });
        }
    }
    let x0 = ImageTensor::new(x, ValueRange::Residual)?;
    residual_decode(&x0, lr, scale)
}
