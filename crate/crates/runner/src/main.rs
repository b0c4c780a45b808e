use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dualdiff_runner::ablate::{self, VARIANTS};
use dualdiff_runner::config::resolve_output;
use dualdiff_runner::eval::{evaluate_dirs, LabelDirs};
use dualdiff_runner::noise::{noise_analysis, write_analysis};
use dualdiff_runner::sample::sample_dir;
use dualdiff_runner::stats::model_stats;
use dualdiff_runner::train::{build_dataset, train};
use dualdiff_runner::{Checkpoint, RunConfig};

#[derive(Parser)]
#[command(name = "dualdiff", version, about = "Residual diffusion super-resolution with a dual decoder")]
struct Cli {
    /// Config file of `dotted.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set cnp.base_channels=16`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Shorthands for frequently changed config keys.
#[derive(Args)]
struct Common {
    /// seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output_dir
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// train.max_steps
    #[arg(long, global = true)]
    max_steps: Option<u64>,
    /// train.batch_size
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// optim.lr
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// diffusion.steps
    #[arg(long, global = true)]
    diffusion_steps: Option<usize>,
    /// cnp.base_channels
    #[arg(long, global = true)]
    base_channels: Option<usize>,
    /// cnp.decoder
    #[arg(long, global = true)]
    decoder: Option<String>,
    /// data.root
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// data.scale
    #[arg(long, global = true)]
    scale: Option<usize>,
    /// train.freeze_lr_encoder
    #[arg(long, global = true)]
    freeze_lr_encoder: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a predictor and write checkpoints plus a loss curve.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve every PNG in a directory.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lr_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
    },
    /// PSNR/SSIM (and optional segmentation metrics) of SR images against HR.
    Eval {
        #[arg(long)]
        sr_dir: PathBuf,
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long, requires = "gt_labels")]
        pred_labels: Option<PathBuf>,
        #[arg(long, requires = "pred_labels")]
        gt_labels: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        num_classes: usize,
        #[arg(long, default_value_t = 6)]
        oa_classes: usize,
        #[arg(long, default_value_t = 5)]
        mean_classes: usize,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare decoder variants and diffusion lengths.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = VARIANTS.map(String::from))]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [10usize, 50, 100])]
        timesteps: Vec<usize>,
    },
    /// CDFs of decoder-branch outputs, predicted and real noise.
    NoiseAnalysis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        analysis_seed: u64,
    },
    /// Parameter counts, FLOP and activation estimates.
    Stats,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let c = &cli.common;
    let mut sets: Vec<String> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            sets.push(format!("{k}={v}"));
        }
    };
    push("seed", c.seed.map(|v| v.to_string()));
    push("output_dir", c.output_dir.as_ref().map(|p| serde_json::to_string(p).expect("path")));
    push("train.max_steps", c.max_steps.map(|v| v.to_string()));
    push("train.batch_size", c.batch_size.map(|v| v.to_string()));
    push("optim.lr", c.lr.map(|v| v.to_string()));
    push("diffusion.steps", c.diffusion_steps.map(|v| v.to_string()));
    push("cnp.base_channels", c.base_channels.map(|v| v.to_string()));
    push("cnp.decoder", c.decoder.clone());
    push("data.root", c.data_root.as_ref().map(|p| serde_json::to_string(p).expect("path")));
    push("data.scale", c.scale.map(|v| v.to_string()));
    push("train.freeze_lr_encoder", c.freeze_lr_encoder.then(|| "true".to_string()));
    for s in sets.iter().chain(&cli.set) {
        cfg.set(s)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    let out = cfg.resolved_output_dir();
    match cli.cmd {
        Cmd::Train { resume } => {
            let o = train(&cfg, &out, resume.as_deref())?;
            println!("trained {} steps; checkpoint {}; loss curve {}", o.steps, o.checkpoint.display(), o.loss_curve.display());
        }
        Cmd::Sample { checkpoint, lr_dir, out_dir, sample_seed } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let m = sample_dir(&ck, &checkpoint, &lr_dir, &resolve_output(&out_dir), sample_seed)?;
            println!("sampled {} images, skipped {}", m.images.len(), m.skipped.len());
        }
        Cmd::Eval { sr_dir, hr_dir, pred_labels, gt_labels, num_classes, oa_classes, mean_classes, out } => {
            let labels = match (pred_labels, gt_labels) {
                (Some(pred), Some(gt)) => Some(LabelDirs { pred, gt, num_classes, oa_classes, mean_classes }),
                _ => None,
            };
            let report = evaluate_dirs(&sr_dir, &hr_dir, labels.as_ref())?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => {
                    let p = resolve_output(&p);
                    if let Some(parent) = p.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    std::fs::write(&p, json)?;
                    println!("mean PSNR {:.3} dB, SSIM {:.4}; report {}", report.mean.psnr_db, report.mean.ssim, p.display());
                }
                None => println!("{json}"),
            }
        }
        Cmd::Ablate { variants, timesteps } => {
            let t = ablate::ablate(&cfg, &variants, &timesteps, &out)?;
            print!("{}", ablate::render(&t));
        }
        Cmd::NoiseAnalysis { checkpoint, n_samples, analysis_seed } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (data, _) = build_dataset(&ck.config)?;
            let a = noise_analysis(&ck, &data, n_samples, analysis_seed)?;
            write_analysis(&a, &out)?;
            for s in &a.stats {
                println!("{:<20} mean {:+.4} var {:.4} KS(N(0,1)) {:.4}", s.name, s.mean, s.variance, s.ks_to_standard_normal);
            }
        }
        Cmd::Stats => {
            cfg.cnp.validate()?;
            let s = model_stats(&cfg.cnp, cfg.data.hr_patch, cfg.data.scale)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
