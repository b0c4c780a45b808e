//! Run configuration as flat `dotted.key = value` text.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dualdiff::optim::AdamConfig;
use dualdiff::{CnpConfig, Error, NoiseSchedule, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Overrides the root that relative output directories are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "DUALDIFF_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub s: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 100, s: 0.008 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    /// Zero disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub freeze_lr_encoder: bool,
    /// Checkpoint whose LR-encoder weights replace the fresh ones.
    pub lr_encoder_checkpoint: Option<PathBuf>,
    pub log_every: u64,
    pub lr_decay: LrDecay,
    /// Linear ramp of the learning rate over the first steps; zero disables it.
    pub warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            max_steps: 300,
            checkpoint_every: 100,
            freeze_lr_encoder: false,
            lr_encoder_checkpoint: None,
            log_every: 25,
            lr_decay: LrDecay::Constant,
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Half-cosine from `optim.lr` at step 1 down to zero after `train.max_steps`.
    Cosine,
}

impl TrainConfig {
    /// Learning-rate multiplier at 1-based `step`: warmup ramp times decay.
    pub fn lr_factor(&self, step: u64) -> f64 {
        let ramp = if step <= self.warmup_steps { step as f64 / (self.warmup_steps + 1) as f64 } else { 1.0 };
        ramp * self.lr_decay.factor(step, self.max_steps)
    }
}

impl LrDecay {
    /// Multiplier on the base learning rate for 1-based `step` of `max_steps`.
    pub fn factor(self, step: u64, max_steps: u64) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => {
                let p = (step.saturating_sub(1)) as f64 / max_steps.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * p.min(1.0)).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory with `hr/` and `lr/`; ignored when `synthetic > 0`.
    pub root: Option<PathBuf>,
    pub scale: usize,
    pub hr_patch: usize,
    /// Number of generated images; zero means read `root`.
    pub synthetic: usize,
    /// Trailing pairs held out for evaluation.
    pub holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, scale: 3, hr_patch: 48, synthetic: 16, holdout: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub diffusion: DiffusionConfig,
    pub optim: AdamConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub cnp: CnpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs"),
            diffusion: DiffusionConfig::default(),
            optim: AdamConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            cnp: CnpConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, value: Value) {
    match key.split_once('.') {
        None => {
            root.insert(key.to_string(), value);
        }
        Some((head, rest)) => {
            let child = root.entry(head.to_string()).or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = child {
                insert_dotted(m, rest, value);
            }
        }
    }
}

/// JSON literals are taken as-is; anything else is a bare string.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let mut root = Map::new();
        for (k, v) in flat {
            insert_dotted(&mut root, k, v.clone());
        }
        Ok(serde_json::from_value(Value::Object(root))?)
    }

    pub fn keys() -> Vec<String> {
        Self::default().to_flat().into_keys().collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# dualdiff run configuration\n");
        for (k, v) in self.to_flat() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Parse config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.to_string()));
        }
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Apply `key = value` overrides; unknown keys are rejected.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut flat = self.to_flat();
        for (k, v) in pairs {
            let k = k.trim();
            if !flat.contains_key(k) {
                return Err(config_err(format!("unknown config key `{k}`")));
            }
            flat.insert(k.to_string(), parse_value(v));
        }
        *self = Self::from_flat(&flat).map_err(|e| config_err(format!("invalid config value: {e}")))?;
        Ok(())
    }

    /// Apply a single `key=value` string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| config_err(format!("expected key=value, got `{assignment}`")))?;
        self.apply([(k, v)])
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.diffusion.steps, self.diffusion.s)
    }

    pub fn validate(&self) -> Result<()> {
        self.cnp.validate()?;
        self.optim.validate()?;
        self.schedule()?;
        if self.train.batch_size == 0 {
            return Err(config_err("train.batch_size must be positive"));
        }
        let d = self.cnp.spatial_divisor();
        if self.data.hr_patch % d != 0 {
            return Err(config_err(format!("data.hr_patch {} is not divisible by {d}", self.data.hr_patch)));
        }
        if self.data.synthetic == 0 && self.data.root.is_none() {
            return Err(config_err("set data.root or data.synthetic"));
        }
        Ok(())
    }

    /// Output directory after applying the output-root override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

/// Resolve a relative path against the output root from the environment, if set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
