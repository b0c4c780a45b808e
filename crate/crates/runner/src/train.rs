//! Training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dualdiff::autograd::Graph;
use dualdiff::cnp::{self, LR_PREFIX};
use dualdiff::data::{load_dir_dataset, synth_dataset, ImagePair, PairedPatchDataset};
use dualdiff::diffusion::training_loss;
use dualdiff::optim::Adam;
use dualdiff::rng::{stream_rng, Stream};
use dualdiff::{Cnp, DiffusionBatch, Error, Result};
use log::info;
use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

pub const LOSS_FILE: &str = "loss.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Training set and the held-out pairs.
pub fn build_dataset(cfg: &RunConfig) -> Result<(PairedPatchDataset<f32>, Vec<ImagePair<f32>>)> {
    let d = &cfg.data;
    let ds = if d.synthetic > 0 {
        synth_dataset(d.synthetic, d.hr_patch, d.scale, cfg.seed)?
    } else {
        let root = d.root.as_ref().ok_or_else(|| Error::Config("data.root is not set".into()))?;
        load_dir_dataset(root, d.scale, d.hr_patch, cfg.seed)?
    };
    if d.holdout == 0 {
        return Ok((ds, Vec::new()));
    }
    ds.split_tail(d.holdout)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Seed of the noise and time-step draws at `step`.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    stream_rng(seed, Stream::Noise, step).random()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    /// Loss of every step from the start of the run, resumed steps included.
    pub losses: Vec<f64>,
    pub loss_curve: PathBuf,
    pub checkpoint: PathBuf,
}

fn fresh_state(cfg: &RunConfig) -> Result<Checkpoint> {
    let mut params = cnp::init_params::<f32>(&cfg.cnp, cfg.seed)?;
    if let Some(path) = &cfg.train.lr_encoder_checkpoint {
        let src = Checkpoint::load(path)?;
        let n = params.load_prefix(&src.params, LR_PREFIX)?;
        info!("loaded {n} LR-encoder tensors from {}", path.display());
    }
    if cfg.train.freeze_lr_encoder {
        params.freeze_prefix(LR_PREFIX);
    }
    Ok(Checkpoint { config: cfg.clone(), step: 0, params, adam: Adam::new(cfg.optim)? })
}

/// Parse a loss curve written by [`train`].
pub fn read_loss_curve(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            let bad = || Error::Data(format!("malformed loss line `{l}`"));
            let step = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let loss = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            Ok((step, loss))
        })
        .collect()
}

/// Train from scratch into `out`, or continue from `resume`.
///
/// Every random draw of step `k` is keyed by `(seed, k)`, so a resumed run
/// repeats exactly the steps an uninterrupted run would have taken.
pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.txt"))?;
    let (data, _) = build_dataset(cfg)?;
    let sched = cfg.schedule()?;
    let mut state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config.cnp != cfg.cnp {
                return Err(Error::Config("resume checkpoint was trained with a different architecture".into()));
            }
            info!("resuming from {} at step {}", p.display(), ck.step);
            Checkpoint { config: cfg.clone(), ..ck }
        }
        None => fresh_state(cfg)?,
    };
    state.adam.cfg = cfg.optim;

    let curve_path = out.join(LOSS_FILE);
    let mut history: Vec<(u64, f64)> = match resume {
        Some(_) if curve_path.exists() => read_loss_curve(&curve_path)?.into_iter().filter(|(s, _)| *s <= state.step).collect(),
        _ => Vec::new(),
    };
    let mut last_good: Option<PathBuf> = resume.map(Path::to_path_buf);
    let bs = cfg.train.batch_size;
    let write_curve = |history: &[(u64, f64)]| -> Result<()> {
        let mut s = String::from("# step loss\n");
        for (k, l) in history {
            writeln!(s, "{k} {l}").expect("string write");
        }
        std::fs::write(&curve_path, s)?;
        Ok(())
    };

    while state.step < cfg.train.max_steps {
        let step = state.step + 1;
        state.adam.cfg.lr = cfg.optim.lr * cfg.train.lr_factor(step);
        let batch = data.batch((step - 1) * bs as u64, bs)?;
        let db = DiffusionBatch::new(batch.hr, batch.lr, cfg.data.scale, &sched, step_seed(cfg.seed, step))?;
        let abort = |t: usize, what: String, last_good: &Option<PathBuf>| {
            let ck = last_good.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string());
            Error::Numeric { t, msg: format!("step {step}: {what}; last good checkpoint: {ck}") }
        };
        let net = Cnp::new(&cfg.cnp, &state.params);
        let mut g = Graph::new();
        let loss = match training_loss(&mut g, &net, &db, &sched) {
            Ok(l) => l,
            Err(Error::Numeric { t, msg }) => {
                write_curve(&history)?;
                return Err(abort(t, msg, &last_good));
            }
            Err(e) => return Err(e),
        };
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            write_curve(&history)?;
            return Err(abort(db.t[0], "non-finite loss".into(), &last_good));
        }
        let grads = g.backward(loss)?.into_param_grads(&state.params);
        drop(g);
        state.adam.update(&mut state.params, &grads)?;
        if !state.params.all_finite() {
            write_curve(&history)?;
            return Err(abort(db.t[0], "non-finite parameters after update".into(), &last_good));
        }
        state.step = step;
        history.push((step, value));
        if cfg.train.log_every > 0 && step % cfg.train.log_every == 0 {
            info!("step {step} loss {value:.5}");
        }
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            let p = out.join(checkpoint_name(step));
            state.save(&p)?;
            write_curve(&history)?;
            last_good = Some(p);
        }
    }
    write_curve(&history)?;
    let final_path = out.join(FINAL_CHECKPOINT);
    state.save(&final_path)?;
    Ok(TrainOutcome { steps: state.step, losses: history.iter().map(|(_, l)| *l).collect(), loss_curve: curve_path, checkpoint: final_path })
}
