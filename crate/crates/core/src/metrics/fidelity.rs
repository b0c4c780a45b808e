use crate::error::{config_err, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `10 log10(max_val^2 / MSE)` over all channels; zero error yields [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>, max_val: f64) -> Result<f64> {
    a.tensor().same_shape(b.tensor())?;
    if max_val <= 0.0 {
        return Err(config_err("psnr max_val must be positive"));
    }
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable Gaussian filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
/// over the valid window positions of every channel and batch item.
pub fn ssim_with_range<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>, data_range: f64) -> Result<f64> {
    a.tensor().same_shape(b.tensor())?;
    let (_, _, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(config_err(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let g = gaussian_window();
    let mut total = 0.0;
    let mut planes = 0usize;
    for (pa, pb) in a.data().chunks(h * w).zip(b.data().chunks(h * w)) {
        let x: Vec<f64> = pa.iter().map(|v| v.f64()).collect();
        let y: Vec<f64> = pb.iter().map(|v| v.f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let mxx = filter_valid(&xx, h, w, &g);
        let myy = filter_valid(&yy, h, w, &g);
        let mxy = filter_valid(&xy, h, w, &g);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let vx = mxx[i] - mx[i] * mx[i];
            let vy = myy[i] - my[i] * my[i];
            let cov = mxy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            acc += num / den;
        }
        total += acc / n as f64;
        planes += 1;
    }
    Ok(total / planes as f64)
}

/// SSIM with the dynamic range taken from the images' value-range tag.
pub fn ssim<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    let (lo, hi) = a
        .range()
        .bounds()
        .ok_or_else(|| config_err("SSIM needs a bounded value range; use ssim_with_range"))?;
    ssim_with_range(a, b, hi - lo)
}
