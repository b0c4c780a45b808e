//! Distribution of decoder-branch outputs against the injected noise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dualdiff::autograd::Graph;
use dualdiff::data::PairedPatchDataset;
use dualdiff::metrics::{noise_cdf_analysis, NoiseAnalysis};
use dualdiff::rng::{stream_rng, Stream};
use dualdiff::{Cnp, DiffusionBatch, Error, Result};
use rand::Rng as _;

use crate::checkpoint::Checkpoint;

pub const ADTD: &str = "adtd_output";
pub const UNET: &str = "unet_decoder_output";
pub const REAL: &str = "real_noise";
pub const PREDICTED: &str = "predicted_noise";
pub const SERIES: [&str; 4] = [ADTD, UNET, REAL, PREDICTED];
pub const REPORT: &str = "noise_analysis.json";

/// Collect `n_samples` per-pixel values of each series with FI disabled.
/// Each branch's features go through the shared output ConvBlock so all four
/// series live in noise space.
pub fn collect_series(ck: &Checkpoint, data: &PairedPatchDataset<f32>, n_samples: usize, seed: u64) -> Result<BTreeMap<String, Vec<f64>>> {
    let cfg = &ck.config;
    if !cfg.cnp.dual_decoder() {
        return Err(Error::Config(format!("noise analysis needs a dual-decoder checkpoint, got {}", cfg.cnp.decoder.name())));
    }
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    let sched = cfg.schedule()?;
    let net = Cnp::new(&cfg.cnp, &ck.params);
    let mut series: BTreeMap<String, Vec<f64>> = SERIES.iter().map(|s| (s.to_string(), Vec::new())).collect();
    let mut pick = stream_rng(seed, Stream::Analysis, 0);
    let mut k = 0u64;
    while series[REAL].len() < n_samples {
        let batch = data.batch(pick.random_range(0..u32::MAX as u64), 1)?;
        let db = DiffusionBatch::new(batch.hr, batch.lr, cfg.data.scale, &sched, stream_rng(seed, Stream::Analysis, k + 1).random())?;
        let mut g = Graph::inference();
        let xv = g.input(db.x_t(&sched)?.into_tensor());
        let lrv = g.input(db.lr.tensor().clone());
        let feats = net.encode_lr(&mut g, lrv)?;
        let taps = net.forward_taps(&mut g, xv, Some(feats), &db.t, false)?;
        let (u, a) = (taps.unet.expect("dual decoder"), taps.adtd.expect("dual decoder"));
        let u = net.tail(&mut g, u)?;
        let a = net.tail(&mut g, a)?;
        let take = |v: &[f32], out: &mut Vec<f64>| out.extend(v.iter().take(n_samples - out.len()).map(|&x| x as f64));
        take(g.value(a).data(), series.get_mut(ADTD).unwrap());
        take(g.value(u).data(), series.get_mut(UNET).unwrap());
        take(g.value(taps.eps).data(), series.get_mut(PREDICTED).unwrap());
        take(db.eps.tensor().data(), series.get_mut(REAL).unwrap());
        k += 1;
    }
    Ok(series)
}

pub fn noise_analysis(ck: &Checkpoint, data: &PairedPatchDataset<f32>, n_samples: usize, seed: u64) -> Result<NoiseAnalysis> {
    noise_cdf_analysis(&collect_series(ck, data, n_samples, seed)?)
}

/// Write one two-column CDF table per series plus a JSON summary.
pub fn write_analysis(a: &NoiseAnalysis, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut paths = Vec::new();
    for s in &a.series {
        let p = out.join(format!("cdf_{}.txt", s.name));
        std::fs::write(&p, s.to_table())?;
        paths.push(p);
    }
    #[derive(serde::Serialize)]
    struct Summary<'a> {
        stats: &'a [dualdiff::metrics::SeriesStats],
        pairwise_ks: &'a [(String, String, f64)],
    }
    let p = out.join(REPORT);
    std::fs::write(&p, serde_json::to_string_pretty(&Summary { stats: &a.stats, pairwise_ks: &a.pairwise_ks })?)?;
    paths.push(p);
    Ok(paths)
}
