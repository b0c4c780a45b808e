//! Building blocks of the noise predictor.

use crate::autograd::{Activation, Graph, Var};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{self, Init, LN_EPS};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::CnpConfig;

/// Sinusoidal position encoding of a diffusion step.
pub fn time_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(config_err(format!("time embedding dim must be even, got {dim}")));
    }
    let mut v = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf((2 * i) as f64 / dim as f64);
        let arg = t as f64 / freq;
        v[2 * i] = arg.sin();
        v[2 * i + 1] = arg.cos();
    }
    Ok(v)
}

/// Encodings for a batch of steps as a `[B, dim]` tensor.
pub fn time_embed_batch<T: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embed(t, dim)?.into_iter().map(T::of));
    }
    Tensor::from_vec(&[ts.len(), dim], data)
}

pub(crate) fn init_res_block<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize, tdim: usize) {
    init.conv(&format!("{name}.conv1"), cout, cin, k);
    init.linear(&format!("{name}.time"), cout, tdim);
    init.norm(&format!("{name}.norm1"), cout);
    init.conv(&format!("{name}.conv2"), cout, cout, k);
    init.norm(&format!("{name}.norm2"), cout);
    if cin != cout {
        init.conv(&format!("{name}.skip"), cout, cin, 1);
    }
}

/// Time-conditioned residual block; `temb` is the activated embedding `[B, E]`.
pub(crate) fn res_block<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, cfg: &CnpConfig, name: &str, x: Var, temb: Var) -> Result<Var> {
    let h = nn::conv(g, p, &format!("{name}.conv1"), x, 1)?;
    let tb = nn::linear(g, p, &format!("{name}.time"), temb)?;
    let h = g.add_channel(h, tb)?;
    let groups = cfg.groups_for(g.shape(h)[1]);
    let h = nn::group_norm(g, p, &format!("{name}.norm1"), h, groups)?;
    let h = g.mish(h);
    let h = nn::conv(g, p, &format!("{name}.conv2"), h, 1)?;
    let h = nn::group_norm(g, p, &format!("{name}.norm2"), h, groups)?;
    let h = g.mish(h);
    let skip = if p.get(&format!("{name}.skip.weight")).is_some() { nn::conv(g, p, &format!("{name}.skip"), x, 1)? } else { x };
    g.add(h, skip)
}

pub(crate) fn init_adtb<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize, tdim: usize, ff: usize) {
    init.linear(&format!("{name}.modulation"), 6 * c, tdim);
    let w = init.store.get_mut(&format!("{name}.modulation.weight")).expect("just inserted");
    for seg in [2, 5] {
        w.data_mut()[seg * c * tdim..(seg + 1) * c * tdim].iter_mut().for_each(|v| *v = T::zero());
    }
    let b = init.store.get_mut(&format!("{name}.modulation.bias")).expect("just inserted");
    for seg in [2, 5] {
        b.data_mut()[seg * c..(seg + 1) * c].iter_mut().for_each(|v| *v = T::zero());
    }
    init.linear(&format!("{name}.qkv"), 3 * c, c);
    init.linear(&format!("{name}.proj"), c, c);
    init.linear(&format!("{name}.ff1"), ff * c, c);
    init.linear(&format!("{name}.ff2"), c, ff * c);
}

/// Token order that groups each `win x win` window contiguously.
pub fn window_order(h: usize, w: usize, win: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(h * w);
    for wy in 0..h / win {
        for wx in 0..w / win {
            for y in 0..win {
                for x in 0..win {
                    perm.push((wy * win + y) * w + wx * win + x);
                }
            }
        }
    }
    perm
}

fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let xs = g.mul_token(x, scale)?;
    let h = g.add(x, xs)?;
    g.add_token(h, shift)
}

/// Adaptive transformer block over `[B, h*w, C]` tokens.
pub fn adtb_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &CnpConfig,
    name: &str,
    tokens: Var,
    temb: Var,
    hw: (usize, usize),
) -> Result<Var> {
    let c = match *g.shape(tokens) {
        [_, n, c] if n == hw.0 * hw.1 => c,
        ref s => return Err(dim_err(format!("ADTB tokens {s:?} do not match {}x{}", hw.0, hw.1))),
    };
    if c % cfg.adtb_heads != 0 {
        return Err(config_err(format!("{c} channels not divisible into {} heads", cfg.adtb_heads)));
    }
    let m = nn::linear(g, p, &format!("{name}.modulation"), temb)?;
    let mut seg = [tokens; 6];
    for (i, s) in seg.iter_mut().enumerate() {
        *s = g.narrow_last(m, i * c, c)?;
    }
    let [shift1, scale1, gate1, shift2, scale2, gate2] = seg;

    let h = g.layer_norm(tokens, LN_EPS)?;
    let h = modulate(g, h, shift1, scale1)?;
    let qkv = nn::linear(g, p, &format!("{name}.qkv"), h)?;
    let n = hw.0 * hw.1;
    let win = cfg.attn_window;
    let windowed = n > cfg.attn_full_max_tokens && hw.0 % win == 0 && hw.1 % win == 0;
    let a = if windowed {
        let perm = window_order(hw.0, hw.1, win);
        let mut inv = vec![0; n];
        for (i, &src) in perm.iter().enumerate() {
            inv[src] = i;
        }
        let q = g.gather_tokens(qkv, &perm)?;
        let a = g.attention(q, cfg.adtb_heads, win * win)?;
        g.gather_tokens(a, &inv)?
    } else {
        if n > cfg.attn_full_max_tokens {
            log::warn!("{}x{} tokens do not tile into {win}x{win} windows; using full attention", hw.0, hw.1);
        }
        g.attention(qkv, cfg.adtb_heads, n)?
    };
    let a = nn::linear(g, p, &format!("{name}.proj"), a)?;
    let a = g.mul_token(a, gate1)?;
    let x = g.add(tokens, a)?;

    let h = g.layer_norm(x, LN_EPS)?;
    let h = modulate(g, h, shift2, scale2)?;
    let f = nn::linear(g, p, &format!("{name}.ff1"), h)?;
    let f = g.mish(f);
    let f = nn::linear(g, p, &format!("{name}.ff2"), f)?;
    let f = g.mul_token(f, gate2)?;
    g.add(x, f)
}

pub(crate) fn init_fi<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize, reduction: usize) {
    let r = (c / reduction).max(1);
    for branch in ["t", "u"] {
        init.linear(&format!("{name}.{branch}.fc1"), r, c);
        init.linear(&format!("{name}.{branch}.fc2"), c, r);
    }
}

fn fi_gate<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let d = g.global_avg_pool(x)?;
    let d = nn::linear(g, p, &format!("{name}.fc1"), d)?;
    let d = g.act(d, Activation::Relu);
    let d = nn::linear(g, p, &format!("{name}.fc2"), d)?;
    let gate = g.act(d, Activation::Sigmoid);
    g.mul_channel(x, gate)
}

/// Channel-gated fusion of the transformer and U-Net decoder features.
pub fn fi_fuse<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, t_feat: Var, u_feat: Var) -> Result<Var> {
    if g.shape(t_feat) != g.shape(u_feat) {
        return Err(dim_err(format!("FI inputs {:?} and {:?} differ", g.shape(t_feat), g.shape(u_feat))));
    }
    let gt = fi_gate(g, p, &format!("{name}.t"), t_feat)?;
    let gu = fi_gate(g, p, &format!("{name}.u"), u_feat)?;
    g.add(gt, gu)
}

pub(crate) fn init_weighted_sum<T: Scalar>(init: &mut Init<'_, T>, name: &str, c_dec: usize, c_skip: usize) {
    init.constant(&format!("{name}.w_dec"), &[1], 1.0);
    init.constant(&format!("{name}.w_skip"), &[1], 0.0);
    init.conv(&format!("{name}.proj"), c_dec, c_skip, 1);
}

/// `w_dec * decoder_feat + w_skip * proj(encoder_skip)`.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, dec: Var, skip: Var) -> Result<Var> {
    let (ds, ss) = (g.shape(dec), g.shape(skip));
    if ds.len() != 4 || ss.len() != 4 || ds[0] != ss[0] || ds[2..] != ss[2..] {
        return Err(dim_err(format!("weighted sum inputs {ds:?} and {ss:?} are not spatially aligned")));
    }
    let w1 = g.param(p, &format!("{name}.w_dec"))?;
    let w2 = g.param(p, &format!("{name}.w_skip"))?;
    let proj = nn::conv(g, p, &format!("{name}.proj"), skip, 1)?;
    let a = g.mul_scalar(dec, w1)?;
    let b = g.mul_scalar(proj, w2)?;
    g.add(a, b)
}
