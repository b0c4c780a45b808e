//! Conditional noise predictor: U-Net encoder, middle blocks and a dual
//! decoder (U-Net branch plus adaptive transformer branch) fused per level.

mod blocks;
mod config;

pub use blocks::{adtb_forward, fi_fuse, time_embed, time_embed_batch, weighted_sum, window_order};
pub use config::{CnpConfig, DecoderMode};

pub(crate) use blocks::{init_adtb, init_fi, init_res_block, init_weighted_sum};

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::lr_encoder;
use crate::nn::{self, Init};
use crate::params::ParamStore;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

/// Prefix shared by every LR-encoder parameter.
pub const LR_PREFIX: &str = "lr_encoder.";

/// Encoder outputs: one skip per level and the deepest feature map.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

/// Decoder outputs before and after the final ConvBlock.
#[derive(Debug, Clone, Copy)]
pub struct DecoderTaps {
    pub unet: Option<Var>,
    pub adtd: Option<Var>,
    pub eps: Var,
}

/// Fresh parameters for the predictor and its LR encoder.
pub fn init_params<T: Scalar>(cfg: &CnpConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let mut init = Init { store: &mut store, rng: &mut rng };
    let k = cfg.kernel_size;
    let base = cfg.base_channels;
    let e = cfg.time_embed_dim;

    if cfg.uses_time() {
        init.linear("time.fc1", e, base);
        init.linear("time.fc2", e, e);
    }
    init.conv("head", base, cfg.image_channels, k);
    let mut c = base;
    for i in 0..cfg.levels() {
        let ci = cfg.level_channels(i);
        for j in 0..cfg.res_blocks_per_level {
            init_res_block(&mut init, &format!("enc.l{i}.res{j}"), if j == 0 { c } else { ci }, ci, k, e);
        }
        c = ci;
        init.conv(&format!("enc.l{i}.down"), c, c, k);
    }
    for j in 0..cfg.middle_res_blocks {
        init_res_block(&mut init, &format!("mid.res{j}"), c, c, k, e);
    }
    for i in (0..cfg.levels()).rev() {
        let ci = cfg.level_channels(i);
        let c_in = if i + 1 < cfg.levels() { cfg.level_channels(i + 1) } else { c };
        if cfg.decoder.has_unet() {
            init.conv(&format!("dec.unet.l{i}.up"), ci, c_in, k);
            for j in 0..cfg.res_blocks_per_level {
                init_res_block(&mut init, &format!("dec.unet.l{i}.res{j}"), ci, ci, k, e);
            }
        }
        if cfg.decoder.has_adtd() {
            init.conv(&format!("dec.adtd.l{i}.up"), ci, c_in, k);
            init_weighted_sum(&mut init, &format!("dec.adtd.l{i}.ws"), ci, ci);
            for j in 0..cfg.adtb_per_level {
                init_adtb(&mut init, &format!("dec.adtd.l{i}.adtb{j}"), ci, e, cfg.ff_expansion);
            }
        }
        if cfg.fi_enabled {
            init_fi(&mut init, &format!("dec.fi.l{i}"), ci, cfg.fi_reduction);
        }
    }
    let c_out = if cfg.levels() > 0 { cfg.level_channels(0) } else { c };
    init.conv("tail.conv1", c_out, c_out, k);
    init.norm("tail.norm", c_out);
    init.conv("tail.conv2", cfg.image_channels, c_out, 1);

    lr_encoder::init_params(&mut init, cfg);
    Ok(store)
}

/// The predictor bound to a parameter set.
#[derive(Debug, Clone, Copy)]
pub struct Cnp<'a, T> {
    pub cfg: &'a CnpConfig,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Cnp<'a, T> {
    pub fn new(cfg: &'a CnpConfig, params: &'a ParamStore<T>) -> Self {
        Self { cfg, params }
    }

    /// Activated time embedding `[B, E]`, or `None` if no block consumes it.
    pub fn time_embedding(&self, g: &mut Graph<T>, ts: &[usize]) -> Result<Option<Var>> {
        if !self.cfg.uses_time() {
            return Ok(None);
        }
        let s = g.input(time_embed_batch(ts, self.cfg.base_channels)?);
        let h = nn::linear(g, self.params, "time.fc1", s)?;
        let h = g.mish(h);
        let h = nn::linear(g, self.params, "time.fc2", h)?;
        Ok(Some(g.mish(h)))
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let d = self.cfg.spatial_divisor();
        if h % d != 0 || w % d != 0 {
            let ph = h.div_ceil(d) * d;
            let pw = w.div_ceil(d) * d;
            return Err(dim_err(format!("input {h}x{w} is not divisible by {d}; pad to {ph}x{pw}")));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph<T>, x_t: Var, lr_feats: Option<Var>, temb: Option<Var>) -> Result<Encoded> {
        let (_, c, h, w) = g.value(x_t).dims4()?;
        if c != self.cfg.image_channels {
            return Err(dim_err(format!("expected {} image channels, got {c}", self.cfg.image_channels)));
        }
        self.check_spatial(h, w)?;
        let p = self.params;
        let lr_up = match lr_feats {
            Some(f) => {
                let (_, fc, fh, fw) = g.value(f).dims4()?;
                if fc != self.cfg.base_channels {
                    return Err(dim_err(format!("LR features have {fc} channels, expected {}", self.cfg.base_channels)));
                }
                Some(if (fh, fw) == (h, w) { f } else { g.bilinear_resize(f, h, w)? })
            }
            None => None,
        };
        let x = nn::conv(g, p, "head", x_t, 1)?;
        let mut x = g.mish(x);
        if self.cfg.levels() == 0 {
            if let Some(l) = lr_up {
                x = g.add(x, l)?;
            }
        }
        let mut skips = Vec::with_capacity(self.cfg.levels());
        for i in 0..self.cfg.levels() {
            for j in 0..self.cfg.res_blocks_per_level {
                x = blocks::res_block(g, p, self.cfg, &format!("enc.l{i}.res{j}"), x, need(temb)?)?;
            }
            if i == 0 {
                if let Some(l) = lr_up {
                    x = g.add(x, l)?;
                }
            }
            skips.push(x);
            x = nn::conv(g, p, &format!("enc.l{i}.down"), x, 2)?;
        }
        Ok(Encoded { skips, bottleneck: x })
    }

    pub fn middle(&self, g: &mut Graph<T>, mut h: Var, temb: Option<Var>) -> Result<Var> {
        for j in 0..self.cfg.middle_res_blocks {
            h = blocks::res_block(g, self.params, self.cfg, &format!("mid.res{j}"), h, need(temb)?)?;
        }
        Ok(h)
    }

    /// Runs both decoder branches; `fi` overrides whether FI modules are applied.
    pub fn decode_taps(&self, g: &mut Graph<T>, enc: &Encoded, temb: Option<Var>, fi: bool) -> Result<DecoderTaps> {
        let cfg = self.cfg;
        let p = self.params;
        if enc.skips.len() != cfg.levels() {
            return Err(crate::error::config_err(format!("{} skips for {} levels", enc.skips.len(), cfg.levels())));
        }
        let mut u = cfg.decoder.has_unet().then_some(enc.bottleneck);
        let mut a = cfg.decoder.has_adtd().then_some(enc.bottleneck);
        for i in (0..cfg.levels()).rev() {
            let skip = enc.skips[i];
            if let Some(x) = u {
                let x = g.upsample2x(x)?;
                let mut x = nn::conv(g, p, &format!("dec.unet.l{i}.up"), x, 1)?;
                x = g.add(x, skip)?;
                for j in 0..cfg.res_blocks_per_level {
                    x = blocks::res_block(g, p, cfg, &format!("dec.unet.l{i}.res{j}"), x, need(temb)?)?;
                }
                u = Some(x);
            }
            if let Some(x) = a {
                let x = g.upsample2x(x)?;
                let x = nn::conv(g, p, &format!("dec.adtd.l{i}.up"), x, 1)?;
                let x = weighted_sum(g, p, &format!("dec.adtd.l{i}.ws"), x, skip)?;
                let (_, _, h, w) = g.value(x).dims4()?;
                let mut tok = g.to_tokens(x)?;
                for j in 0..cfg.adtb_per_level {
                    tok = adtb_forward(g, p, cfg, &format!("dec.adtd.l{i}.adtb{j}"), tok, need(temb)?, (h, w))?;
                }
                a = Some(g.from_tokens(tok, h, w)?);
            }
            if let (true, Some(uu), Some(aa)) = (fi && cfg.fi_enabled, u, a) {
                let fused = fi_fuse(g, p, &format!("dec.fi.l{i}"), aa, uu)?;
                a = Some(g.add(aa, fused)?);
                u = Some(g.add(uu, fused)?);
            }
        }
        let feat = match (u, a) {
            (Some(u), Some(a)) => g.add(u, a)?,
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => unreachable!("every decoder mode builds a branch"),
        };
        let eps = self.tail(g, feat)?;
        Ok(DecoderTaps { unet: u, adtd: a, eps })
    }

    pub fn dual_decode(&self, g: &mut Graph<T>, enc: &Encoded, temb: Option<Var>) -> Result<Var> {
        Ok(self.decode_taps(g, enc, temb, true)?.eps)
    }

    /// Final ConvBlock mapping decoder features to image channels.
    pub fn tail(&self, g: &mut Graph<T>, feat: Var) -> Result<Var> {
        let p = self.params;
        let h = nn::conv(g, p, "tail.conv1", feat, 1)?;
        let groups = self.cfg.groups_for(g.shape(h)[1]);
        let h = nn::group_norm(g, p, "tail.norm", h, groups)?;
        let h = g.mish(h);
        nn::conv(g, p, "tail.conv2", h, 1)
    }

    /// LR features from a normalized LR image.
    pub fn encode_lr(&self, g: &mut Graph<T>, lr: Var) -> Result<Var> {
        lr_encoder::encode_lr(g, self.params, self.cfg, lr)
    }

    /// Predicted noise, with the same shape as `x_t`.
    pub fn forward(&self, g: &mut Graph<T>, x_t: Var, lr_feats: Option<Var>, ts: &[usize]) -> Result<Var> {
        Ok(self.forward_taps(g, x_t, lr_feats, ts, true)?.eps)
    }

    pub fn forward_taps(&self, g: &mut Graph<T>, x_t: Var, lr_feats: Option<Var>, ts: &[usize], fi: bool) -> Result<DecoderTaps> {
        if ts.len() != g.shape(x_t)[0] {
            return Err(dim_err(format!("{} time steps for a batch of {}", ts.len(), g.shape(x_t)[0])));
        }
        let temb = self.time_embedding(g, ts)?;
        let mut enc = self.encode(g, x_t, lr_feats, temb)?;
        enc.bottleneck = self.middle(g, enc.bottleneck, temb)?;
        self.decode_taps(g, &enc, temb, fi)
    }
}

fn need(temb: Option<Var>) -> Result<Var> {
    temb.ok_or_else(|| crate::error::config_err("time embedding missing for a time-conditioned block"))
}

/// Parameter count excluding the LR encoder.
pub fn cnp_param_count<T: Scalar>(params: &ParamStore<T>) -> usize {
    params.numel() - params.numel_with_prefix(LR_PREFIX)
}
