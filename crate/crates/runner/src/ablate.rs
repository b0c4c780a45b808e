//! Decoder-variant and diffusion-length comparisons under a shared budget.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dualdiff::data::{bicubic_upsample, ImagePair};
use dualdiff::metrics::{psnr, ssim};
use dualdiff::{CnpConfig, DecoderMode, Error, Result};
use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::sample::super_resolve;
use crate::train::{build_dataset, train};

pub const VARIANTS: [&str; 4] = ["adtd_only", "unet_only", "dual_no_fi", "dual_fi"];
pub const TIMESTEPS: [usize; 4] = [10, 50, 100, 200];
pub const TABLE: &str = "ablation.txt";
pub const REPORT: &str = "ablation.json";

pub fn variant_config(name: &str, base: &CnpConfig) -> Result<CnpConfig> {
    let (decoder, fi) = match name {
        "adtd_only" => (DecoderMode::AdtdOnly, false),
        "unet_only" => (DecoderMode::UnetOnly, false),
        "dual_no_fi" => (DecoderMode::Dual, false),
        "dual_fi" => (DecoderMode::Dual, true),
        other => return Err(Error::Config(format!("unknown variant `{other}` (expected one of {})", VARIANTS.join(", ")))),
    };
    Ok(CnpConfig { decoder, fi_enabled: fi, ..base.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub diffusion_steps: usize,
    pub parameters: usize,
    pub adtd_parameters: usize,
    /// Mean loss over the last tenth of training.
    pub final_loss: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub loss_curve: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub bicubic_psnr_db: f64,
    pub bicubic_ssim: f64,
    pub rows: Vec<AblationRow>,
    /// Pairwise PSNR orderings; informative only.
    pub observations: Vec<String>,
}

/// PSNR and SSIM of `f(lr)` against HR, averaged over the held-out pairs.
fn score(holdout: &[ImagePair<f32>], mut f: impl FnMut(usize, &ImagePair<f32>) -> Result<dualdiff::ImageTensor<f32>>) -> Result<(f64, f64)> {
    let (mut p, mut s) = (0.0, 0.0);
    for (i, pair) in holdout.iter().enumerate() {
        let sr = f(i, pair)?;
        p += psnr(&sr, &pair.hr, 1.0)?;
        s += ssim(&sr, &pair.hr)?;
    }
    let n = holdout.len() as f64;
    Ok((p / n, s / n))
}

/// Run list: every variant at the configured length, then `dual_fi` at every
/// other requested length.
pub fn plan(cfg: &RunConfig, variants: &[String], timesteps: &[usize]) -> Result<Vec<(String, usize)>> {
    let mut runs = Vec::new();
    for v in variants {
        variant_config(v, &cfg.cnp)?;
        runs.push((v.clone(), cfg.diffusion.steps));
    }
    for &t in timesteps {
        if !TIMESTEPS.contains(&t) {
            return Err(Error::Config(format!("unsupported diffusion length {t} (expected one of {TIMESTEPS:?})")));
        }
        if !runs.contains(&("dual_fi".to_string(), t)) {
            runs.push(("dual_fi".to_string(), t));
        }
    }
    Ok(runs)
}

pub fn ablate(cfg: &RunConfig, variants: &[String], timesteps: &[usize], out: &Path) -> Result<AblationTable> {
    if cfg.data.holdout == 0 {
        return Err(Error::Config("ablation needs held-out pairs; set data.holdout".into()));
    }
    let runs = plan(cfg, variants, timesteps)?;
    let (_, holdout) = build_dataset(cfg)?;
    let scale = cfg.data.scale;
    let (bicubic_psnr_db, bicubic_ssim) = score(&holdout, |_, p| {
        let mut up = bicubic_upsample(&p.lr, scale)?;
        up.clip_to_range();
        Ok(up)
    })?;
    let mut rows = Vec::new();
    for (variant, steps) in runs {
        let mut rc = cfg.clone();
        rc.cnp = variant_config(&variant, &cfg.cnp)?;
        rc.diffusion.steps = steps;
        let dir = out.join(format!("{variant}_T{steps}"));
        info!("ablation run {variant} T={steps}");
        let outcome = train(&rc, &dir, None)?;
        let ck = Checkpoint::load(&outcome.checkpoint)?;
        let (psnr_db, ssim) = score(&holdout, |i, p| super_resolve(&ck, &p.lr, rc.seed.wrapping_add(i as u64)))?;
        let tail = (outcome.losses.len() / 10).max(1);
        let final_loss = outcome.losses[outcome.losses.len() - tail..].iter().sum::<f64>() / tail as f64;
        rows.push(AblationRow {
            variant,
            diffusion_steps: steps,
            parameters: dualdiff::cnp::cnp_param_count(&ck.params),
            adtd_parameters: ck.params.numel_with_prefix("dec.adtd."),
            final_loss,
            psnr_db,
            ssim,
            loss_curve: outcome.loss_curve,
        });
    }
    let mut observations = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let (a, b) = (&rows[i], &rows[j]);
            let rel = if a.psnr_db > b.psnr_db { ">" } else if a.psnr_db < b.psnr_db { "<" } else { "=" };
            observations.push(format!("{}/T{} {rel} {}/T{} ({:+.3} dB)", a.variant, a.diffusion_steps, b.variant, b.diffusion_steps, a.psnr_db - b.psnr_db));
        }
    }
    let table = AblationTable { bicubic_psnr_db, bicubic_ssim, rows, observations };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(TABLE), render(&table))?;
    std::fs::write(out.join(REPORT), serde_json::to_string_pretty(&table)?)?;
    Ok(table)
}

pub fn render(t: &AblationTable) -> String {
    let mut s = String::new();
    writeln!(s, "{:<12} {:>5} {:>10} {:>10} {:>10} {:>9} {:>7}", "variant", "T", "params", "adtd", "loss", "psnr_db", "ssim").unwrap();
    writeln!(s, "{:<12} {:>5} {:>10} {:>10} {:>10} {:>9.3} {:>7.4}", "bicubic", "-", "-", "-", "-", t.bicubic_psnr_db, t.bicubic_ssim).unwrap();
    for r in &t.rows {
        writeln!(
            s,
            "{:<12} {:>5} {:>10} {:>10} {:>10.5} {:>9.3} {:>7.4}",
            r.variant, r.diffusion_steps, r.parameters, r.adtd_parameters, r.final_loss, r.psnr_db, r.ssim
        )
        .unwrap();
    }
    s
}
