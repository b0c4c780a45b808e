//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! depends on a parameter. Parameters are bound by name from a
//! [`ParamStore`](crate::params::ParamStore), so the gradients come back keyed
//! the same way.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;
use crate::scalar::{gemm, Scalar, Strides};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Mish,
    Relu,
    Sigmoid,
    LeakyRelu(f64),
}

/// Broadcast layout: `x` is viewed as `[b, m, c, s]` and `v[batch * c + c_idx]`
/// (or `v[c_idx]` when `v` is shared across the batch) is applied to each entry.
#[derive(Debug, Clone, Copy)]
struct Bcast {
    b: usize,
    m: usize,
    c: usize,
    s: usize,
    batched: bool,
}

impl Bcast {
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let mut i = 0;
        for bi in 0..self.b {
            let base = if self.batched { bi * self.c } else { 0 };
            for _ in 0..self.m {
                for ci in 0..self.c {
                    for _ in 0..self.s {
                        f(i, base + ci);
                        i += 1;
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    BcastAdd { x: Var, v: Var, layout: Bcast },
    BcastMul { x: Var, v: Var, layout: Bcast },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(T, T)> },
    LayerNorm { x: Var, stats: Vec<(T, T)> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Act(Var, Activation),
    Attention { qkv: Var, heads: usize, group: usize, probs: Vec<T> },
    ToTokens(Var),
    FromTokens(Var),
    GatherTokens { x: Var, perm: Vec<usize> },
    Upsample2x(Var),
    Bilinear { x: Var },
    GlobalAvgPool(Var),
    ConcatChannels(Vec<Var>),
    NarrowLast { x: Var, start: usize },
    Reshape(Var),
    L1Loss { pred: Var, target: Tensor<T> },
    SumAll(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    record: bool,
    flops: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn act_forward<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Mish => x * tanh_softplus(x),
        Activation::Relu => x.max(T::zero()),
        Activation::Sigmoid => sigmoid(x),
        Activation::LeakyRelu(slope) => {
            if x > T::zero() {
                x
            } else {
                x * T::of(slope)
            }
        }
    }
}

fn act_derivative<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Mish => {
            let tsp = tanh_softplus(x);
            tsp + x * (T::one() - tsp * tsp) * sigmoid(x)
        }
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (T::one() - s)
        }
        Activation::LeakyRelu(slope) => {
            if x > T::zero() {
                T::one()
            } else {
                T::of(slope)
            }
        }
    }
}

/// `tanh(softplus(x)) = n / (n + 2)` with `n = e^x (e^x + 2)`.
#[inline]
fn tanh_softplus<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        return T::one();
    }
    let e = x.exp();
    let n = e * (e + T::of(2.0));
    n / (n + T::of(2.0))
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Unfold one `[c, h, w]` image into `[c * k * k, ho * wo]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_outputs(kx, pad, stride, w, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * stride + kx - pad;
                    if stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[first + j * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose tap `kx` lands inside a row of width `w`.
fn valid_outputs(kx: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    if w + pad <= kx {
        return (0, 0);
    }
    let hi = ((w - 1 + pad - kx) / stride + 1).min(wo);
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_outputs(kx, pad, stride, w, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    if lo == hi {
                        continue;
                    }
                    let first = (ci * h + iy as usize) * w + lo * stride + kx - pad;
                    let line = &src[oy * wo + lo..oy * wo + hi];
                    if stride == 1 {
                        dx[first..first + hi - lo].iter_mut().zip(line).for_each(|(d, &v)| *d += v);
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            dx[first + j * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Separable linear-interpolation weights for one axis (half-pixel centers).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), record: true, flops: 0 }
    }

    /// A graph that never runs backward; large activation caches are skipped.
    pub fn inference() -> Self {
        Self { record: false, ..Self::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        self.flops += value.len() as u64;
        let needs_grad = self.record && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward floating-point operations so far; products count as two
    /// (multiply and add), every other produced value as one.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Bytes held by every node value on the tape.
    pub fn activation_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum::<usize>() * T::BYTES
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not tied to a named parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let record = self.record;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: record });
        Var(self.nodes.len() - 1)
    }

    /// Bind the named parameter, creating its leaf on first use.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?.clone();
        let trainable = self.record && !store.is_frozen(name);
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, [Var; 2])> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        Ok((out, [a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, p) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &p))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, p) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &p))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, p) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &p))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    fn bcast_layout(&self, x: Var, v: Var, channel_axis_last: bool) -> Result<Bcast> {
        let shape = self.shape(x);
        let vlen = self.value(v).len();
        let (b, m, c, s) = if channel_axis_last {
            // [B, N, C]
            match *shape {
                [b, n, c] => (b, n, c, 1),
                _ => return Err(dim_err(format!("token broadcast needs rank 3, got {shape:?}"))),
            }
        } else {
            // [B, C, ...]
            if shape.len() < 2 {
                return Err(dim_err(format!("channel broadcast needs rank >= 2, got {shape:?}")));
            }
            (shape[0], 1, shape[1], shape[2..].iter().product())
        };
        let batched = if vlen == b * c && b > 1 {
            true
        } else if vlen == c {
            false
        } else if vlen == b * c {
            true
        } else {
            return Err(dim_err(format!("broadcast operand of {vlen} elements does not fit {shape:?}")));
        };
        Ok(Bcast { b, m, c, s, batched })
    }

    fn scalar_layout(&self, x: Var, v: Var) -> Result<Bcast> {
        if self.value(v).len() != 1 {
            return Err(dim_err("scalar broadcast operand must have one element"));
        }
        Ok(Bcast { b: 1, m: 1, c: 1, s: self.value(x).len(), batched: false })
    }

    fn bcast_apply(&mut self, x: Var, v: Var, layout: Bcast, mul: bool) -> Var {
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = xv.to_vec();
        layout.for_each(|i, j| {
            if mul {
                out[i] *= vv[j]
            } else {
                out[i] += vv[j]
            }
        });
        let t = Tensor::from_vec(self.shape(x), out).expect("shape preserved");
        let op = if mul { Op::BcastMul { x, v, layout } } else { Op::BcastAdd { x, v, layout } };
        self.push(t, op, &[x, v])
    }

    /// `x[b, c, ...] + v[b, c]` (or `v[c]`).
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let l = self.bcast_layout(x, v, false)?;
        Ok(self.bcast_apply(x, v, l, false))
    }

    /// `x[b, c, ...] * v[b, c]` (or `v[c]`).
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let l = self.bcast_layout(x, v, false)?;
        Ok(self.bcast_apply(x, v, l, true))
    }

    /// `x[b, n, c] + v[b, c]` (or `v[c]`).
    pub fn add_token(&mut self, x: Var, v: Var) -> Result<Var> {
        let l = self.bcast_layout(x, v, true)?;
        Ok(self.bcast_apply(x, v, l, false))
    }

    /// `x[b, n, c] * v[b, c]` (or `v[c]`).
    pub fn mul_token(&mut self, x: Var, v: Var) -> Result<Var> {
        let l = self.bcast_layout(x, v, true)?;
        Ok(self.bcast_apply(x, v, l, true))
    }

    /// Multiply every entry by a one-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let l = self.scalar_layout(x, s)?;
        Ok(self.bcast_apply(x, s, l, true))
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let l = self.scalar_layout(x, s)?;
        Ok(self.bcast_apply(x, s, l, false))
    }

    /// 2-d convolution, `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bn, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return Err(dim_err(format!("conv weight {:?} does not match input {:?}", self.shape(w), self.shape(x))));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(dim_err(format!("conv kernel {k} does not fit input {h}x{wd}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(dim_err("conv bias length mismatch"));
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let kk = cin * k * k;
        let p = ho * wo;
        let direct = k == 1 && stride == 1 && pad == 0;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::zero(); bn * cout * p];
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
        for bi in 0..bn {
            let xb = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let src: &[T] = if direct {
                xb
            } else {
                im2col(xb, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            let ob = &mut out[bi * cout * p..(bi + 1) * cout * p];
            gemm(cout, kk, p, T::one(), ws, Strides::row_major(kk), src, Strides::row_major(p), T::zero(), ob, Strides::row_major(p));
            if let Some(b) = b {
                let bs = self.value(b).data();
                for (co, row) in ob.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bs[co]);
                }
            }
        }
        self.flops += 2 * (bn * cout * kk * p) as u64;
        let t = Tensor::from_vec(&[bn, cout, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, &parents))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(dim_err("group norm needs [B, C, ...]"));
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if groups == 0 || c % groups != 0 {
            return Err(dim_err(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(dim_err("group norm affine length mismatch"));
        }
        let cg = c / groups;
        let n = cg * s;
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xs.len()];
        let mut stats = Vec::with_capacity(b * groups);
        for bi in 0..b {
            for g in 0..groups {
                let off = (bi * c + g * cg) * s;
                let seg = &xs[off..off + n];
                let mean = seg.iter().copied().sum::<T>() / T::of(n as f64);
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(n as f64);
                let rstd = T::one() / (var + T::of(eps)).sqrt();
                stats.push((mean, rstd));
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    for j in 0..s {
                        let i = off + ci * s + j;
                        out[i] = (xs[i] - mean) * rstd * gs[ch] + bs[ch];
                    }
                }
            }
        }
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta]))
    }

    /// Normalize over the last axis without an affine transform.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err("layer norm on rank-0 tensor"))?;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        let mut stats = Vec::with_capacity(xs.len() / d);
        for (row, o) in xs.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<T>() / T::of(d as f64);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(d as f64);
            let rstd = T::one() / (var + T::of(eps)).sqrt();
            stats.push((mean, rstd));
            for (ov, &xv) in o.iter_mut().zip(row) {
                *ov = (xv - mean) * rstd;
            }
        }
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::LayerNorm { x, stats }, &[x]))
    }

    /// `x[..., in] @ w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let din = *shape.last().ok_or_else(|| dim_err("linear on rank-0 tensor"))?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || ws[1] != din {
            return Err(dim_err(format!("linear weight {ws:?} does not match input {shape:?}")));
        }
        let dout = ws[0];
        let rows = self.value(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        gemm(
            rows,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            Strides::row_major(din),
            self.value(w).data(),
            Strides::transposed(din),
            T::zero(),
            &mut out,
            Strides::row_major(dout),
        );
        if let Some(b) = b {
            let bs = self.value(b).data();
            if bs.len() != dout {
                return Err(dim_err("linear bias length mismatch"));
            }
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bs).for_each(|(o, &bv)| *o += bv);
            }
        }
        self.flops += 2 * (rows * din * dout) as u64;
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = dout;
        let t = Tensor::from_vec(&oshape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b }, &parents))
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| act_forward(kind, v));
        self.push(out, Op::Act(x, kind), &[x])
    }

    pub fn mish(&mut self, x: Var) -> Var {
        self.act(x, Activation::Mish)
    }

    /// Multi-head self-attention over `qkv: [B, N, 3C]` (q | k | v along the
    /// last axis). Tokens attend only within consecutive groups of `group`
    /// tokens; `group == N` is full attention.
    pub fn attention(&mut self, qkv: Var, heads: usize, group: usize) -> Result<Var> {
        let (b, n, c3) = match *self.shape(qkv) {
            [b, n, c3] => (b, n, c3),
            ref s => return Err(dim_err(format!("attention needs [B, N, 3C], got {s:?}"))),
        };
        if c3 % 3 != 0 {
            return Err(dim_err("attention input width must be 3C"));
        }
        let c = c3 / 3;
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{c} channels not divisible into {heads} heads")));
        }
        if group == 0 || n % group != 0 {
            return Err(dim_err(format!("{n} tokens not divisible into groups of {group}")));
        }
        let d = c / heads;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let ngroups = n / group;
        let qs = self.value(qkv).data();
        let mut out = vec![T::zero(); b * n * c];
        let keep = self.record && self.nodes[qkv.0].needs_grad;
        let mut probs = if keep { vec![T::zero(); b * ngroups * heads * group * group] } else { Vec::new() };
        let mut p = vec![T::zero(); group * group];
        for bi in 0..b {
            for gi in 0..ngroups {
                let tok0 = bi * n + gi * group;
                for h in 0..heads {
                    let qo = tok0 * c3 + h * d;
                    let ko = qo + c;
                    let vo = qo + 2 * c;
                    gemm(group, d, group, scale, &qs[qo..], Strides::new(c3, 1), &qs[ko..], Strides::new(1, c3), T::zero(), &mut p, Strides::row_major(group));
                    for row in p.chunks_mut(group) {
                        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for v in row.iter_mut() {
                            *v = (*v - mx).exp();
                            sum += *v;
                        }
                        row.iter_mut().for_each(|v| *v /= sum);
                    }
                    let oo = tok0 * c + h * d;
                    gemm(group, group, d, T::one(), &p, Strides::row_major(group), &qs[vo..], Strides::new(c3, 1), T::zero(), &mut out[oo..], Strides::new(c, 1));
                    if keep {
                        let po = ((bi * ngroups + gi) * heads + h) * group * group;
                        probs[po..po + group * group].copy_from_slice(&p);
                    }
                }
            }
        }
        self.flops += 4 * (b * n * group * c) as u64;
        let t = Tensor::from_vec(&[b, n, c], out)?;
        Ok(self.push(t, Op::Attention { qkv, heads, group, probs }, &[qkv]))
    }

    /// `[B, C, H, W] -> [B, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let s = h * w;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                for j in 0..s {
                    out[(bi * s + j) * c + ci] = xs[(bi * c + ci) * s + j];
                }
            }
        }
        let t = Tensor::from_vec(&[b, s, c], out)?;
        Ok(self.push(t, Op::ToTokens(x), &[x]))
    }

    /// `[B, H*W, C] -> [B, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (b, s, c) = match *self.shape(x) {
            [b, s, c] if s == h * w => (b, s, c),
            ref sh => return Err(dim_err(format!("cannot fold {sh:?} into {h}x{w}"))),
        };
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for bi in 0..b {
            for j in 0..s {
                for ci in 0..c {
                    out[(bi * c + ci) * s + j] = xs[(bi * s + j) * c + ci];
                }
            }
        }
        let t = Tensor::from_vec(&[b, c, h, w], out)?;
        Ok(self.push(t, Op::FromTokens(x), &[x]))
    }

    /// Reorder tokens: `out[:, i, :] = x[:, perm[i], :]`.
    pub fn gather_tokens(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (b, n, c) = match *self.shape(x) {
            [b, n, c] if n == perm.len() => (b, n, c),
            ref sh => return Err(dim_err(format!("permutation of {} does not fit {sh:?}", perm.len()))),
        };
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for bi in 0..b {
            for (i, &src) in perm.iter().enumerate() {
                let o = (bi * n + i) * c;
                let s = (bi * n + src) * c;
                out[o..o + c].copy_from_slice(&xs[s..s + c]);
            }
        }
        let t = Tensor::from_vec(&[b, n, c], out)?;
        Ok(self.push(t, Op::GatherTokens { x, perm: perm.to_vec() }, &[x]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let xs = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); b * c * h2 * w2];
        for p in 0..b * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = xs[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[b, c, h2, w2], out)?;
        Ok(self.push(t, Op::Upsample2x(x), &[x]))
    }

    /// Bilinear resize with half-pixel centers.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("bilinear target must be non-empty".into()));
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        for p in 0..b * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let (ly, lx) = (T::of(ly), T::of(lx));
                    let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                    out[(p * out_h + oy) * out_w + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        let t = Tensor::from_vec(&[b, c, out_h, out_w], out)?;
        Ok(self.push(t, Op::Bilinear { x }, &[x]))
    }

    /// Mean over spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let s = h * w;
        let xs = self.value(x).data();
        let out = xs.chunks(s).map(|ch| ch.iter().copied().sum::<T>() / T::of(s as f64)).collect();
        let t = Tensor::from_vec(&[b, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| dim_err("nothing to concatenate"))?;
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut ctot = 0;
        for &v in xs {
            let (bb, c, hh, ww) = self.value(v).dims4()?;
            if (bb, hh, ww) != (b, h, w) {
                return Err(dim_err("concat inputs disagree on batch or spatial size"));
            }
            ctot += c;
        }
        let s = h * w;
        let mut out = Vec::with_capacity(b * ctot * s);
        for bi in 0..b {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[bi * c * s..(bi + 1) * c * s]);
            }
        }
        let t = Tensor::from_vec(&[b, ctot, h, w], out)?;
        Ok(self.push(t, Op::ConcatChannels(xs.to_vec()), xs))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err("narrow on rank-0 tensor"))?;
        if start + len > d {
            return Err(dim_err(format!("narrow {start}+{len} exceeds {d}")));
        }
        let out: Vec<T> = self.value(x).data().chunks(d).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        let t = Tensor::from_vec(&oshape, out)?;
        Ok(self.push(t, Op::NarrowLast { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.value(pred).same_shape(target)?;
        let n = T::of(target.len() as f64);
        let s = self.value(pred).data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(s), Op::L1Loss { pred, target: target.clone() }, &[pred]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Back-propagate from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(dim_err("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::BcastAdd { x, v, layout } => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate_with(grads, *v, |dv| layout.for_each(|i, j| dv[j] += gd[i]));
            }
            Op::BcastMul { x, v, layout } => {
                let vv = self.value(*v).data();
                let xv = self.value(*x).data();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    let d = dx.data_mut();
                    layout.for_each(|i, j| d[i] *= vv[j]);
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate_with(grads, *v, |dv| layout.for_each(|i, j| dv[j] += gd[i] * xv[i]));
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(*x, *w, *b, *stride, *pad, g, grads)?,
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let shape = self.shape(*x);
                let (bn, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let cg = c / groups;
                let n = T::of((cg * s) as f64);
                let xs = self.value(*x).data();
                let gs = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xs.len()];
                for bi in 0..bn {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[bi * groups + gi];
                        let off = (bi * c + gi * cg) * s;
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for j in 0..s {
                                let idx = off + ci * s + j;
                                let xh = (xs[idx] - mean) * rstd;
                                dgamma[ch] += gd[idx] * xh;
                                dbeta[ch] += gd[idx];
                                let dxh = gd[idx] * gs[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        let (m1, m2) = (sum_dxh / n, sum_dxh_xh / n);
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for j in 0..s {
                                let idx = off + ci * s + j;
                                let xh = (xs[idx] - mean) * rstd;
                                dx[idx] = rstd * (gd[idx] * gs[ch] - m1 - xh * m2);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
                self.accumulate(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(self.shape(*beta), dbeta)?);
            }
            Op::LayerNorm { x, stats } => {
                let d = *self.shape(*x).last().unwrap();
                let nd = T::of(d as f64);
                let xs = self.value(*x).data();
                let mut dx = vec![T::zero(); xs.len()];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let row = &xs[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let m1 = grow.iter().copied().sum::<T>() / nd;
                    let m2 = grow.iter().zip(row).map(|(&gv, &xv)| gv * (xv - mean) * rstd).sum::<T>() / nd;
                    for j in 0..d {
                        let xh = (row[j] - mean) * rstd;
                        dx[r * d + j] = rstd * (grow[j] - m1 - xh * m2);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
            }
            Op::Linear { x, w, b } => {
                let din = *self.shape(*x).last().unwrap();
                let dout = self.shape(*w)[0];
                let rows = self.value(*x).len() / din;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(rows, dout, din, T::one(), gd, Strides::row_major(dout), self.value(*w).data(), Strides::row_major(din), T::zero(), &mut dx, Strides::row_major(din));
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
                }
                let xs = self.value(*x).data();
                self.accumulate_with(grads, *w, |dw| {
                    gemm(dout, rows, din, T::one(), gd, Strides::transposed(dout), xs, Strides::row_major(din), T::one(), dw, Strides::row_major(din));
                });
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |db| {
                        for row in gd.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    });
                }
            }
            Op::Act(x, kind) => {
                let xs = self.value(*x).data();
                let dx: Vec<T> = gd.iter().zip(xs).map(|(&gv, &xv)| gv * act_derivative(*kind, xv)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
            }
            Op::Attention { qkv, heads, group, probs } => self.attention_backward(*qkv, *heads, *group, probs, g, grads)?,
            Op::ToTokens(x) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let s = h * w;
                let mut dx = vec![T::zero(); gd.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for j in 0..s {
                            dx[(bi * c + ci) * s + j] = gd[(bi * s + j) * c + ci];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
            }
            Op::FromTokens(x) => {
                let (b, s, c) = match *self.shape(*x) {
                    [b, s, c] => (b, s, c),
                    _ => unreachable!(),
                };
                let mut dx = vec![T::zero(); gd.len()];
                for bi in 0..b {
                    for j in 0..s {
                        for ci in 0..c {
                            dx[(bi * s + j) * c + ci] = gd[(bi * c + ci) * s + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
            }
            Op::GatherTokens { x, perm } => {
                let (b, n, c) = match *self.shape(*x) {
                    [b, n, c] => (b, n, c),
                    _ => unreachable!(),
                };
                self.accumulate_with(grads, *x, |dx| {
                    for bi in 0..b {
                        for (i, &src) in perm.iter().enumerate() {
                            for ci in 0..c {
                                dx[(bi * n + src) * c + ci] += gd[(bi * n + i) * c + ci];
                            }
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let (h2, w2) = (2 * h, 2 * w);
                self.accumulate_with(grads, *x, |dx| {
                    for p in 0..b * c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dx[(p * h + y / 2) * w + xx / 2] += gd[(p * h2 + y) * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::Bilinear { x } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                self.accumulate_with(grads, *x, |dx| {
                    for p in 0..b * c {
                        let d = &mut dx[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                                let gv = gd[(p * oh + oy) * ow + ox];
                                let (ly, lx) = (T::of(ly), T::of(lx));
                                let one = T::one();
                                d[y0 * w + x0] += gv * (one - ly) * (one - lx);
                                d[y0 * w + x1] += gv * (one - ly) * lx;
                                d[y1 * w + x0] += gv * ly * (one - lx);
                                d[y1 * w + x1] += gv * ly * lx;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let s = h * w;
                let inv = T::one() / T::of(s as f64);
                self.accumulate_with(grads, *x, |dx| {
                    for (p, chunk) in dx.chunks_mut(s).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += gd[p] * inv);
                    }
                });
            }
            Op::ConcatChannels(xs) => {
                let (b, _, h, w) = g.dims4()?;
                let s = h * w;
                let ctot = g.shape()[1];
                let mut c0 = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    self.accumulate_with(grads, v, |dx| {
                        for bi in 0..b {
                            let src = &gd[(bi * ctot + c0) * s..(bi * ctot + c0 + c) * s];
                            dx[bi * c * s..(bi + 1) * c * s].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    });
                    c0 += c;
                }
            }
            Op::NarrowLast { x, start } => {
                let d = *self.shape(*x).last().unwrap();
                let len = *g.shape().last().unwrap();
                self.accumulate_with(grads, *x, |dx| {
                    for (row, grow) in dx.chunks_mut(d).zip(gd.chunks(len)) {
                        row[*start..start + len].iter_mut().zip(grow).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.clone().reshape(self.shape(*x))?),
            Op::L1Loss { pred, target } => {
                let n = T::of(target.len() as f64);
                let g0 = gd[0];
                let dx: Vec<T> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| {
                        let diff = a - b;
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        g0 * sign / n
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::from_vec(target.shape(), dx)?);
            }
            Op::SumAll(x) => self.accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0])),
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let (bn, cin, h, wd) = self.value(x).dims4()?;
        let (cout, _, k, _) = self.value(w).dims4()?;
        let (_, _, ho, wo) = g.dims4()?;
        let p = ho * wo;
        let kk = cin * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let gd = g.data();
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dx = if want_x { vec![T::zero(); xs.len()] } else { Vec::new() };
        let mut dw = vec![T::zero(); if want_w { ws.len() } else { 0 }];
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
        let mut dcols = if direct || !want_x { Vec::new() } else { vec![T::zero(); kk * p] };
        for bi in 0..bn {
            let gb = &gd[bi * cout * p..(bi + 1) * cout * p];
            let xb = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            if want_w {
                let src: &[T] = if direct {
                    xb
                } else {
                    im2col(xb, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
                    &cols
                };
                gemm(cout, p, kk, T::one(), gb, Strides::row_major(p), src, Strides::transposed(p), T::one(), &mut dw, Strides::row_major(kk));
            }
            if want_x {
                let dxb = &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if direct {
                    gemm(kk, cout, p, T::one(), ws, Strides::transposed(kk), gb, Strides::row_major(p), T::one(), dxb, Strides::row_major(p));
                } else {
                    gemm(kk, cout, p, T::one(), ws, Strides::transposed(kk), gb, Strides::row_major(p), T::zero(), &mut dcols, Strides::row_major(p));
                    col2im(&dcols, cin, h, wd, k, stride, pad, ho, wo, dxb);
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::from_vec(self.shape(x), dx)?);
        }
        if want_w {
            self.accumulate(grads, w, Tensor::from_vec(self.shape(w), dw)?);
        }
        if let Some(b) = b {
            self.accumulate_with(grads, b, |db| {
                for bi in 0..bn {
                    for (co, d) in db.iter_mut().enumerate() {
                        let o = (bi * cout + co) * p;
                        *d += gd[o..o + p].iter().copied().sum::<T>();
                    }
                }
            });
        }
        Ok(())
    }

    fn attention_backward(&self, qkv: Var, heads: usize, group: usize, probs: &[T], g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let (b, n, c3) = match *self.shape(qkv) {
            [b, n, c3] => (b, n, c3),
            _ => unreachable!(),
        };
        let c = c3 / 3;
        let d = c / heads;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let ngroups = n / group;
        let qs = self.value(qkv).data();
        let gd = g.data();
        let mut dqkv = vec![T::zero(); qs.len()];
        let mut dp = vec![T::zero(); group * group];
        let gg = group * group;
        for bi in 0..b {
            for gi in 0..ngroups {
                let tok0 = bi * n + gi * group;
                for h in 0..heads {
                    let po = ((bi * ngroups + gi) * heads + h) * gg;
                    let p = &probs[po..po + gg];
                    let qo = tok0 * c3 + h * d;
                    let ko = qo + c;
                    let vo = qo + 2 * c;
                    let oo = tok0 * c + h * d;
                    // dP = dO V^T
                    gemm(group, d, group, T::one(), &gd[oo..], Strides::new(c, 1), &qs[vo..], Strides::new(1, c3), T::zero(), &mut dp, Strides::row_major(group));
                    // dV = P^T dO
                    gemm(group, group, d, T::one(), p, Strides::transposed(group), &gd[oo..], Strides::new(c, 1), T::one(), &mut dqkv[vo..], Strides::new(c3, 1));
                    // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                    for (prow, dprow) in p.chunks(group).zip(dp.chunks_mut(group)) {
                        let dot = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        for (dv, &pv) in dprow.iter_mut().zip(prow) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    // dQ = dS K ; dK = dS^T Q
                    gemm(group, group, d, T::one(), &dp, Strides::row_major(group), &qs[ko..], Strides::new(c3, 1), T::one(), &mut dqkv[qo..], Strides::new(c3, 1));
                    gemm(group, group, d, T::one(), &dp, Strides::transposed(group), &qs[qo..], Strides::new(c3, 1), T::one(), &mut dqkv[ko..], Strides::new(c3, 1));
                }
            }
        }
        self.accumulate(grads, qkv, Tensor::from_vec(self.shape(qkv), dqkv)?);
        Ok(())
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every bound parameter; parameters that did not influence
    /// the root get zeros.
    pub fn into_param_grads(mut self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter(|(name, _)| !store.is_frozen(name))
            .map(|(name, v)| {
                let g = self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(store.get(&name).expect("bound").shape()));
                (name, g)
            })
            .collect()
    }
}
