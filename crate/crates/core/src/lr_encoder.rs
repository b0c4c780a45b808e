//! Residual-in-residual dense encoder producing conditioning features from
//! the LR image at LR resolution.

use crate::autograd::{Activation, Graph, Var};
use crate::cnp::CnpConfig;
use crate::error::{dim_err, Result};
use crate::nn::{self, Init};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const RESIDUAL_SCALE: f64 = 0.2;
pub const LEAKY_SLOPE: f64 = 0.2;
const DENSE_BLOCKS: usize = 3;
const DENSE_CONVS: usize = 5;

pub(crate) fn init_params<T: Scalar>(init: &mut Init<'_, T>, cfg: &CnpConfig) {
    let (nf, gc, k) = (cfg.base_channels, cfg.lr_growth, cfg.kernel_size);
    init.conv("lr_encoder.lift", nf, cfg.image_channels, k);
    for r in 0..cfg.lr_depth {
        for d in 0..DENSE_BLOCKS {
            for c in 0..DENSE_CONVS {
                let cin = nf + c * gc;
                let cout = if c + 1 == DENSE_CONVS { nf } else { gc };
                init.conv(&format!("lr_encoder.rrdb{r}.rdb{d}.conv{c}"), cout, cin, k);
            }
        }
    }
    if cfg.lr_depth > 0 {
        init.conv("lr_encoder.trunk", nf, nf, k);
    }
}

fn dense_block<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let mut feats = vec![x];
    for c in 0..DENSE_CONVS {
        let inp = if feats.len() == 1 { x } else { g.concat_channels(&feats)? };
        let h = nn::conv(g, p, &format!("{name}.conv{c}"), inp, 1)?;
        if c + 1 == DENSE_CONVS {
            let h = g.scale(h, T::of(RESIDUAL_SCALE));
            return g.add(x, h);
        }
        feats.push(g.act(h, Activation::LeakyRelu(LEAKY_SLOPE)));
    }
    unreachable!("dense block has a final convolution")
}

fn rrdb<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let mut h = x;
    for d in 0..DENSE_BLOCKS {
        h = dense_block(g, p, &format!("{name}.rdb{d}"), h)?;
    }
    let h = g.scale(h, T::of(RESIDUAL_SCALE));
    g.add(x, h)
}

/// LR features `[B, base_channels, h, w]` for a normalized LR image.
pub fn encode_lr<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, cfg: &CnpConfig, lr: Var) -> Result<Var> {
    let (_, c, _, _) = g.value(lr).dims4()?;
    if c != cfg.image_channels {
        return Err(dim_err(format!("LR image has {c} channels, expected {}", cfg.image_channels)));
    }
    let fea = nn::conv(g, p, "lr_encoder.lift", lr, 1)?;
    if cfg.lr_depth == 0 {
        return Ok(fea);
    }
    let mut h = fea;
    for r in 0..cfg.lr_depth {
        h = rrdb(g, p, &format!("lr_encoder.rrdb{r}"), h)?;
    }
    let trunk = nn::conv(g, p, "lr_encoder.trunk", h, 1)?;
    g.add(fea, trunk)
}
