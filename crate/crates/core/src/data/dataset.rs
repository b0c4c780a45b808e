use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[0, 1] -> [-1, 1]`. Out-of-range input is logged and clipped.
pub fn normalize<T: Scalar>(img: &ImageTensor<T>) -> ImageTensor<T> {
    let mut clipped = 0usize;
    let data: Vec<T> = img
        .data()
        .iter()
        .map(|&v| {
            if v < T::zero() || v > T::one() {
                clipped += 1;
            }
            v.max(T::zero()).min(T::one()) * T::of(2.0) - T::one()
        })
        .collect();
    if clipped > 0 {
        log::warn!("normalize: clipped {clipped} values outside [0, 1]");
    }
    ImageTensor::new(Tensor::from_vec(&img.shape(), data).expect("same shape"), ValueRange::Symmetric).expect("finite")
}

/// `[-1, 1] -> [0, 1]`. Out-of-range input is logged and clipped.
pub fn denormalize<T: Scalar>(img: &ImageTensor<T>) -> ImageTensor<T> {
    let mut clipped = 0usize;
    let half = T::of(0.5);
    let data: Vec<T> = img
        .data()
        .iter()
        .map(|&v| {
            if v < -T::one() || v > T::one() {
                clipped += 1;
            }
            (v.max(-T::one()).min(T::one()) + T::one()) * half
        })
        .collect();
    if clipped > 0 {
        log::warn!("denormalize: clipped {clipped} values outside [-1, 1]");
    }
    ImageTensor::new(Tensor::from_vec(&img.shape(), data).expect("same shape"), ValueRange::Unit).expect("finite")
}

fn crop<T: Scalar>(img: &ImageTensor<T>, y0: usize, x0: usize, size: usize) -> Result<ImageTensor<T>> {
    let (b, c, h, w) = img.dims();
    if y0 + size > h || x0 + size > w {
        return Err(dim_err(format!("crop {size} at ({y0},{x0}) exceeds {h}x{w}")));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(b * c * size * size);
    for p in 0..b * c {
        for y in y0..y0 + size {
            let row = (p * h + y) * w;
            out.extend_from_slice(&src[row + x0..row + x0 + size]);
        }
    }
    ImageTensor::new(Tensor::from_vec(&[b, c, size, size], out)?, img.range())
}

/// Aligned random crop of an HR/LR pair. The HR origin is always a multiple
/// of `scale`, so the LR crop covers exactly the same region.
pub fn crop_pair<T: Scalar>(
    hr: &ImageTensor<T>,
    lr: &ImageTensor<T>,
    hr_patch: usize,
    scale: usize,
    rng_seed: u64,
) -> Result<(ImageTensor<T>, ImageTensor<T>)> {
    let mut rng = stream_rng(rng_seed, Stream::Crop, 0);
    crop_pair_with(hr, lr, hr_patch, scale, &mut rng)
}

pub(crate) fn crop_pair_with<T: Scalar, R: Rng + ?Sized>(
    hr: &ImageTensor<T>,
    lr: &ImageTensor<T>,
    hr_patch: usize,
    scale: usize,
    rng: &mut R,
) -> Result<(ImageTensor<T>, ImageTensor<T>)> {
    if scale == 0 || hr_patch == 0 || hr_patch % scale != 0 {
        return Err(config_err(format!("hr_patch {hr_patch} must be a positive multiple of scale {scale}")));
    }
    let (_, _, hh, hw) = hr.dims();
    let (_, _, lh, lw) = lr.dims();
    if hh != lh * scale || hw != lw * scale {
        return Err(dim_err(format!("HR {hh}x{hw} is not {scale}x LR {lh}x{lw}")));
    }
    if hr_patch > hh || hr_patch > hw {
        return Err(dim_err(format!("patch {hr_patch} larger than image {hh}x{hw}")));
    }
    let lp = hr_patch / scale;
    let ly = rng.random_range(0..=lh - lp);
    let lx = rng.random_range(0..=lw - lp);
    Ok((crop(hr, ly * scale, lx * scale, hr_patch)?, crop(lr, ly, lx, lp)?))
}

/// One HR/LR pair in `[0, 1]`, each `[1, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair<T> {
    pub name: String,
    pub hr: ImageTensor<T>,
    pub lr: ImageTensor<T>,
}

/// Normalized training batch.
#[derive(Debug, Clone)]
pub struct TrainingBatch<T> {
    pub hr: ImageTensor<T>,
    pub lr: ImageTensor<T>,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedPatchDataset<T> {
    pairs: Vec<ImagePair<T>>,
    scale: usize,
    hr_patch: usize,
    seed: u64,
}

impl<T: Scalar> PairedPatchDataset<T> {
    pub fn new(pairs: Vec<ImagePair<T>>, scale: usize, hr_patch: usize, seed: u64) -> Result<Self> {
        if !(scale == 3 || scale == 4 || scale == 2) {
            return Err(config_err(format!("unsupported scale {scale}")));
        }
        if hr_patch == 0 || hr_patch % 16 != 0 || hr_patch % scale != 0 {
            return Err(config_err(format!("hr_patch {hr_patch} must be divisible by 16 and by scale {scale}")));
        }
        if pairs.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        for p in &pairs {
            let (_, c, hh, hw) = p.hr.dims();
            let (_, lc, lh, lw) = p.lr.dims();
            if c != lc || hh != lh * scale || hw != lw * scale {
                return Err(dim_err(format!("pair `{}`: HR {hh}x{hw} is not {scale}x LR {lh}x{lw}", p.name)));
            }
            if hh < hr_patch || hw < hr_patch {
                return Err(dim_err(format!("pair `{}` smaller than patch {hr_patch}", p.name)));
            }
        }
        Ok(Self { pairs, scale, hr_patch, seed })
    }

    pub fn pairs(&self) -> &[ImagePair<T>] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn hr_patch(&self) -> usize {
        self.hr_patch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Visiting order of one epoch; a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut stream_rng(self.seed, Stream::Shuffle, epoch));
        order
    }

    /// Pair index and crop of the `k`-th sample drawn over the whole run.
    pub fn sample(&self, k: u64) -> Result<(usize, ImageTensor<T>, ImageTensor<T>)> {
        let n = self.pairs.len() as u64;
        let idx = self.epoch_order(k / n)[(k % n) as usize];
        let p = &self.pairs[idx];
        let mut rng = stream_rng(self.seed, Stream::Crop, k);
        let (hr, lr) = crop_pair_with(&p.hr, &p.lr, self.hr_patch, self.scale, &mut rng)?;
        Ok((idx, hr, lr))
    }

    /// Normalized batch of samples `k0 .. k0 + batch`.
    pub fn batch(&self, k0: u64, batch: usize) -> Result<TrainingBatch<T>> {
        let mut hrs = Vec::with_capacity(batch);
        let mut lrs = Vec::with_capacity(batch);
        let mut indices = Vec::with_capacity(batch);
        for j in 0..batch as u64 {
            let (i, hr, lr) = self.sample(k0 + j)?;
            hrs.push(normalize(&hr));
            lrs.push(normalize(&lr));
            indices.push(i);
        }
        Ok(TrainingBatch { hr: ImageTensor::stack(&hrs)?, lr: ImageTensor::stack(&lrs)?, indices })
    }

    /// Split off the last `n` pairs as a held-out set.
    pub fn split_tail(mut self, n: usize) -> Result<(Self, Vec<ImagePair<T>>)> {
        if n >= self.pairs.len() {
            return Err(config_err(format!("cannot hold out {n} of {} pairs", self.pairs.len())));
        }
        let tail = self.pairs.split_off(self.pairs.len() - n);
        Ok((self, tail))
    }
}
