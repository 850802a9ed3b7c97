//! Transformer building blocks recorded on a [`Graph`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{init_uniform, ParamId, ParamSet};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x W + b`, weight stored `d_in x d_out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.register(format!("{name}.weight"), init_uniform(d_in, d_out, d_in, rng))?,
            bias: ps.register(format!("{name}.bias"), Tensor::zeros(1, d_out))?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ps: &ParamSet<R>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        linear(g, x, w, b)
    }
}

/// `x W + b` for graph values. Shape errors name both operands.
pub fn linear<R: Real>(g: &mut Graph<R>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (xs, ws) = (g.shape(x), g.shape(weight));
    if xs[1] != ws[0] {
        return Err(Error::Shape(format!(
            "linear: input {xs:?} does not match weight {ws:?}"
        )));
    }
    let y = g.matmul(x, weight)?;
    g.add_row(y, bias)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(ps: &mut ParamSet<R>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.register(format!("{name}.gain"), Tensor::filled(1, d, R::ONE))?,
            shift: ps.register(format!("{name}.shift"), Tensor::zeros(1, d))?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ps: &ParamSet<R>, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.gain);
        let shift = g.param(ps, self.shift);
        g.layer_norm(x, gain, shift, LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Real>(
        ps: &mut ParamSet<R>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng)?,
            out: Linear::new(ps, &format!("{name}.out"), d, d, rng)?,
            heads,
        })
    }

    /// `query [n_q, D]` attends over `key`/`value [n_k, D]`. `mask`, when
    /// given, is a row-major `n_q x n_k` boolean matrix of allowed pairs.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        ps: &ParamSet<R>,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.q.forward(g, ps, query)?;
        let k = self.k.forward(g, ps, key)?;
        let v = self.v.forward(g, ps, value)?;
        let ctx = attention_heads(g, q, k, v, self.heads, mask)?;
        self.out.forward(g, ps, ctx)
    }

    /// Attention weights per head, for inspection and tests.
    pub fn weights<R: Real>(
        &self,
        g: &mut Graph<R>,
        ps: &ParamSet<R>,
        query: Var,
        key: Var,
        mask: Option<&[bool]>,
    ) -> Result<Vec<Tensor<R>>> {
        let q = self.q.forward(g, ps, query)?;
        let k = self.k.forward(g, ps, key)?;
        let d = g.shape(q)[1];
        let dh = d / self.heads;
        let mut out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let s = g.matmul_t(qh, false, kh, true)?;
            let s = g.scale(s, R::of(1.0 / (dh as f64).sqrt()));
            let p = g.softmax_rows(s, mask)?;
            out.push(g.value(p).clone());
        }
        Ok(out)
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "embedding dim {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Core of multi-head attention on already-projected `q`, `k`, `v`:
/// per head `softmax(q_h k_h^T / sqrt(d_h)) v_h`, heads concatenated.
pub fn attention_heads<R: Real>(
    g: &mut Graph<R>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = g.shape(q)[1];
    check_heads(d, heads)?;
    if g.shape(k)[1] != d || g.shape(v)[1] != d || g.shape(k)[0] != g.shape(v)[0] {
        return Err(Error::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    let dh = d / heads;
    let scale = R::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = g.matmul_t(qh, false, kh, true)?;
        let s = g.scale(s, scale);
        let p = g.softmax_rows(s, mask)?;
        outs.push(g.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Two-layer feed-forward block, hidden width `4 D`, GELU.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Real>(ps: &mut ParamSet<R>, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(ps, &format!("{name}.up"), d, 4 * d, rng)?,
            down: Linear::new(ps, &format!("{name}.down"), 4 * d, d, rng)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ps: &ParamSet<R>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.down.forward(g, ps, h)
    }
}

/// Sinusoidal encoding of a (possibly fractional or negative) position:
/// `[sin(p w_0), cos(p w_0), sin(p w_1), ...]` with `w_i = 10000^(-2i/D)`.
pub fn sinusoid_at(position: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let w = 10000f64.powf(-((2 * i) as f64) / d as f64);
        out[2 * i] = (position * w).sin();
        out[2 * i + 1] = (position * w).cos();
    }
    out
}

/// Sinusoidal position table for positions `0..length`.
pub fn sinusoidal_position_encoding<R: Real>(length: usize, d: usize) -> Result<Tensor<R>> {
    positions_table(&(0..length).map(|p| p as f64).collect::<Vec<_>>(), d)
}

/// Sinusoidal encodings for arbitrary positions, one row each.
pub fn positions_table<R: Real>(positions: &[f64], d: usize) -> Result<Tensor<R>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal encoding needs an even dimension, got {d}"
        )));
    }
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        data.extend(sinusoid_at(p, d).into_iter().map(R::of));
    }
    Tensor::from_vec(positions.len(), d, data)
}
