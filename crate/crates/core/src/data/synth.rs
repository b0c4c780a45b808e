use std::f64::consts::TAU;

use rand::Rng;

use crate::data::dataset::{ImagePair, PairedPatchDataset};
use crate::data::resize::bicubic_resize;
use crate::error::{config_err, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CHANNELS: usize = 3;

/// One `[1, 3, size, size]` image in `[0, 1]`: a few low-frequency sinusoids
/// under random rectangles and a straight edge.
pub fn synth_image<T: Scalar, R: Rng + ?Sized>(size: usize, rng: &mut R) -> ImageTensor<T> {
    let s = size as f64;
    let mut img = vec![0.0f64; CHANNELS * size * size];
    let base: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(0.3..0.7)).collect();
    let max_freq = (s / 8.0).max(1.0);
    let waves: Vec<(f64, f64, f64, [f64; CHANNELS])> = (0..4)
        .map(|_| {
            let fy = rng.random_range(-max_freq..max_freq);
            let fx = rng.random_range(-max_freq..max_freq);
            let phase = rng.random_range(0.0..TAU);
            let amp = [0; CHANNELS].map(|_| rng.random_range(0.02..0.1));
            (fy, fx, phase, amp)
        })
        .collect();
    for c in 0..CHANNELS {
        for y in 0..size {
            for x in 0..size {
                let mut v = base[c];
                for (fy, fx, phase, amp) in &waves {
                    v += amp[c] * (TAU * (fy * y as f64 + fx * x as f64) / s + phase).sin();
                }
                img[(c * size + y) * size + x] = v;
            }
        }
    }
    for _ in 0..3 {
        let h = rng.random_range(size / 8..=size / 2).max(1);
        let w = rng.random_range(size / 8..=size / 2).max(1);
        let y0 = rng.random_range(0..=size - h);
        let x0 = rng.random_range(0..=size - w);
        let color: [f64; CHANNELS] = [0; CHANNELS].map(|_| rng.random_range(0.0..1.0));
        let alpha = rng.random_range(0.4..0.8);
        for (c, col) in color.iter().enumerate() {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let p = &mut img[(c * size + y) * size + x];
                    *p = (1.0 - alpha) * *p + alpha * col;
                }
            }
        }
    }
    let theta = rng.random_range(0.0..TAU);
    let (ny, nx) = theta.sin_cos();
    let offset = rng.random_range(-0.3..0.3) * s;
    let step = rng.random_range(-0.2..0.2);
    for c in 0..CHANNELS {
        for y in 0..size {
            for x in 0..size {
                let d = ny * (y as f64 - s / 2.0) + nx * (x as f64 - s / 2.0) - offset;
                if d > 0.0 {
                    img[(c * size + y) * size + x] += step;
                }
            }
        }
    }
    let data = img.into_iter().map(|v| T::of(v.clamp(0.0, 1.0))).collect();
    ImageTensor::new(Tensor::from_vec(&[1, CHANNELS, size, size], data).expect("sized"), ValueRange::Unit).expect("finite")
}

/// Deterministic synthetic pairs; LR is the bicubic downscale of HR.
/// Patches cover whole images (`hr_patch = hr_size`).
pub fn synth_dataset<T: Scalar>(n: usize, hr_size: usize, scale: usize, seed: u64) -> Result<PairedPatchDataset<T>> {
    if n == 0 {
        return Err(config_err("synthetic dataset needs at least one image"));
    }
    if scale == 0 || hr_size == 0 || hr_size % 16 != 0 || hr_size % scale != 0 {
        return Err(config_err(format!("hr_size {hr_size} must be divisible by 16 and by scale {scale}")));
    }
    let lr_size = hr_size / scale;
    let pairs = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Synth, i as u64);
            let hr = synth_image::<T, _>(hr_size, &mut rng);
            let mut lr = bicubic_resize(&hr, lr_size, lr_size)?;
            lr.clip_to_range();
            Ok(ImagePair { name: format!("synth_{i:04}"), hr, lr })
        })
        .collect::<Result<Vec<_>>>()?;
    PairedPatchDataset::new(pairs, scale, hr_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::bicubic_upsample;
    use crate::metrics::psnr;

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = synth_dataset::<f32>(16, 48, 3, 7).unwrap();
        let b = synth_dataset::<f32>(16, 48, 3, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset::<f32>(16, 48, 3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pairs_satisfy_scale_invariant() {
        let ds = synth_dataset::<f32>(4, 48, 3, 7).unwrap();
        for p in ds.pairs() {
            assert_eq!(p.hr.shape(), [1, 3, 48, 48]);
            assert_eq!(p.lr.shape(), [1, 3, 16, 16]);
            assert!(p.hr.data().iter().chain(p.lr.data()).all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn bicubic_baseline_is_finite() {
        let ds = synth_dataset::<f64>(16, 48, 3, 7).unwrap();
        let mean: f64 = ds
            .pairs()
            .iter()
            .map(|p| psnr(&bicubic_upsample(&p.lr, 3).unwrap(), &p.hr, 1.0).unwrap())
            .sum::<f64>()
            / 16.0;
        assert!(mean.is_finite() && mean > 10.0 && mean < 60.0, "baseline {mean}");
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(synth_dataset::<f32>(2, 40, 4, 0).is_err());
        assert!(synth_dataset::<f32>(2, 48, 5, 0).is_err());
        assert!(synth_dataset::<f32>(0, 48, 3, 0).is_err());
    }
}
