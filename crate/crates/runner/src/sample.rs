//! Super-resolving a directory of LR images with a trained checkpoint.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dualdiff::data::{denormalize, list_pngs, normalize, read_png, write_png};
use dualdiff::diffusion::sample;
use dualdiff::{Cnp, Error, ImageTensor, Result};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledImage {
    pub input: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub input: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub diffusion_steps: usize,
    pub scale: usize,
    pub images: Vec<SampledImage>,
    pub skipped: Vec<SkippedImage>,
}

/// SR image in `[0, 1]` for an LR image in `[0, 1]`.
pub fn super_resolve(ck: &Checkpoint, lr: &ImageTensor<f32>, seed: u64) -> Result<ImageTensor<f32>> {
    let cfg = &ck.config;
    let sched = cfg.schedule()?;
    let net = Cnp::new(&cfg.cnp, &ck.params);
    let sr = sample(&net, &normalize(lr), &sched, cfg.data.scale, seed)?;
    Ok(denormalize(&sr))
}

/// Sample every PNG in `lr_dir` into `out_dir` with the same file name.
/// Image `i` in stem order uses seed `seed + i`.
pub fn sample_dir(ck: &Checkpoint, ckpt_path: &Path, lr_dir: &Path, out_dir: &Path, seed: u64) -> Result<SampleManifest> {
    let inputs = list_pngs(lr_dir)?;
    std::fs::create_dir_all(out_dir)?;
    let scale = ck.config.data.scale;
    let d = ck.config.cnp.spatial_divisor();
    let mut manifest = SampleManifest {
        checkpoint: ckpt_path.to_path_buf(),
        seed,
        diffusion_steps: ck.config.diffusion.steps,
        scale,
        images: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, (stem, path)) in inputs.iter().enumerate() {
        let item_seed = seed.wrapping_add(i as u64);
        let skip = |reason: String, m: &mut SampleManifest| {
            warn!("skipping {}: {reason}", path.display());
            m.skipped.push(SkippedImage { input: path.clone(), reason });
        };
        let lr = match read_png::<f32>(path) {
            Ok(lr) => lr,
            Err(e) => {
                skip(e.to_string(), &mut manifest);
                continue;
            }
        };
        let (_, _, h, w) = lr.dims();
        if (h * scale) % d != 0 || (w * scale) % d != 0 {
            skip(format!("{}x{} SR output is not divisible by {d}", h * scale, w * scale), &mut manifest);
            continue;
        }
        let start = Instant::now();
        let sr = match super_resolve(ck, &lr, item_seed) {
            Ok(sr) => sr,
            Err(e) => {
                skip(e.to_string(), &mut manifest);
                continue;
            }
        };
        let output = out_dir.join(format!("{stem}.png"));
        write_png(&output, &sr)?;
        manifest.images.push(SampledImage { input: path.clone(), output, seed: item_seed, wall_time_s: start.elapsed().as_secs_f64() });
    }
    std::fs::write(out_dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    if manifest.images.is_empty() {
        return Err(Error::Data(format!("no image in {} could be sampled", lr_dir.display())));
    }
    Ok(manifest)
}
