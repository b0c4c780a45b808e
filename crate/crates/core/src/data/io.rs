use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};

use crate::data::dataset::{ImagePair, PairedPatchDataset};
use crate::error::{dim_err, Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Read an 8- or 16-bit PNG as a `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn read_png<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let img = image::open(path)?.into_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in raw.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = T::of(px[c] as f64);
        }
    }
    ImageTensor::new(Tensor::from_vec(&[1, 3, h, w], data)?, ValueRange::Unit)
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[1, C, H, W]` tensor in `[0, 1]` (C = 1 or 3) as an 8-bit PNG.
pub fn write_png<T: Scalar>(path: &Path, img: &ImageTensor<T>) -> Result<()> {
    let (b, c, h, w) = img.dims();
    if b != 1 {
        return Err(dim_err(format!("write_png expects one image, got batch {b}")));
    }
    let d = img.data();
    let dynimg = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| quantize(v)).collect()).expect("sized"),
        ),
        3 => {
            let mut buf = Vec::with_capacity(3 * h * w);
            for i in 0..h * w {
                for ch in 0..3 {
                    buf.push(quantize(d[ch * h * w + i]));
                }
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, buf).expect("sized"))
        }
        _ => return Err(dim_err(format!("cannot write {c}-channel PNG"))),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    dynimg.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// PNG files of a directory keyed by file stem.
pub fn list_pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Load `root/hr/*.png` and `root/lr/*.png` paired by stem. When
/// `root/manifest.txt` exists, only the stems it lists are used, in order.
pub fn load_dir_dataset<T: Scalar>(root: &Path, scale: usize, hr_patch: usize, seed: u64) -> Result<PairedPatchDataset<T>> {
    let hr = list_pngs(&root.join("hr"))?;
    let lr = list_pngs(&root.join("lr"))?;
    let manifest = root.join("manifest.txt");
    let stems: Vec<String> = if manifest.exists() {
        fs::read_to_string(&manifest)?.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect()
    } else {
        hr.keys().filter(|k| lr.contains_key(*k)).cloned().collect()
    };
    let mut pairs = Vec::with_capacity(stems.len());
    for stem in stems {
        let (Some(h), Some(l)) = (hr.get(&stem), lr.get(&stem)) else {
            return Err(Error::Data(format!("stem `{stem}` lacks an HR or LR image")));
        };
        pairs.push(ImagePair { name: stem, hr: read_png(h)?, lr: read_png(l)? });
    }
    PairedPatchDataset::new(pairs, scale, hr_patch, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    #[test]
    fn png_round_trip_is_quantized_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset::<f32>(1, 48, 3, 1).unwrap();
        let path = dir.path().join("a.png");
        write_png(&path, &ds.pairs()[0].hr).unwrap();
        let back: ImageTensor<f32> = read_png(&path).unwrap();
        assert_eq!(back.shape(), [1, 3, 48, 48]);
        assert!(back.tensor().max_abs_diff(ds.pairs()[0].hr.tensor()) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn reads_sixteen_bit_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_fn(4, 2, |x, _| image::Rgb([x as u16 * 20000, 65535, 0]));
        img.save(&path).unwrap();
        let t: ImageTensor<f64> = read_png(&path).unwrap();
        assert_eq!(t.shape(), [1, 3, 2, 4]);
        assert!((t.data()[1] - 20000.0 / 65535.0).abs() < 1e-6);
        assert!((t.data()[8] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn directory_dataset_pairs_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset::<f32>(3, 48, 3, 2).unwrap();
        for p in ds.pairs() {
            write_png(&dir.path().join("hr").join(format!("{}.png", p.name)), &p.hr).unwrap();
            write_png(&dir.path().join("lr").join(format!("{}.png", p.name)), &p.lr).unwrap();
        }
        // An unmatched HR file is ignored without a manifest.
        write_png(&dir.path().join("hr").join("orphan.png"), &ds.pairs()[0].hr).unwrap();
        let loaded = load_dir_dataset::<f32>(dir.path(), 3, 48, 0).unwrap();
        assert_eq!(loaded.len(), 3);
        fs::write(dir.path().join("manifest.txt"), "synth_0002\nsynth_0000\n").unwrap();
        let loaded = load_dir_dataset::<f32>(dir.path(), 3, 48, 0).unwrap();
        let names: Vec<_> = loaded.pairs().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["synth_0002", "synth_0000"]);
        fs::write(dir.path().join("manifest.txt"), "orphan\n").unwrap();
        assert!(load_dir_dataset::<f32>(dir.path(), 3, 48, 0).is_err());
    }
}
