//! Layers built on the tape: linear maps, layer norm, pre-norm transformer
//! blocks with optional windowed attention, and sinusoidal encodings.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{normal_tensor, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), normal_tensor(rng, &[fan_in, fan_out], std), true);
        let bias = Some(ps.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn without_bias<R: Rng>(
        ps: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), normal_tensor(rng, &[fan_in, fan_out], std), true);
        Self { weight, bias: None, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore<f32>, name: &str, width: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0), false),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[width]), false),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Pre-norm block: `x + Attn(LN(x))` followed by `x + FFN(LN(x))`, GELU
/// feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
    pub heads: usize,
}

impl TransformerBlock {
    /// `out_std` initializes the two residual-branch output projections;
    /// zero makes the block an exact identity.
    pub fn new<R: Rng>(
        ps: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        out_std: f64,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!("width {width} not divisible by {heads} heads")));
        }
        let hidden = width * mlp_ratio.max(1);
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), width),
            qkv: Linear::new(ps, rng, &format!("{name}.qkv"), width, 3 * width, INIT_STD),
            proj: Linear::new(ps, rng, &format!("{name}.proj"), width, width, out_std),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), width),
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), width, hidden, INIT_STD),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, width, out_std),
            width,
            heads,
        })
    }

    /// `windows`, when given, must partition the rows of `x`; attention is
    /// then restricted to each part.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        windows: Option<&[Vec<usize>]>,
    ) -> Result<Var> {
        let (rows, width) = g.dims(x);
        if width != self.width {
            return Err(Error::shape(format!("block width {} given {width}", self.width)));
        }
        let h = self.ln1.forward(g, ps, x)?;
        let qkv = self.qkv.forward(g, ps, h)?;
        let attn = match windows {
            None => self.attend(g, qkv)?,
            Some(parts) => {
                let mut outs = Vec::with_capacity(parts.len());
                let mut order = Vec::with_capacity(rows);
                for part in parts {
                    let local = g.gather_rows(qkv, part)?;
                    outs.push(self.attend(g, local)?);
                    order.extend_from_slice(part);
                }
                if order.len() != rows {
                    return Err(Error::shape("attention windows do not partition the rows"));
                }
                let stacked = g.concat_rows(&outs)?;
                let mut inverse = vec![usize::MAX; rows];
                for (pos, &r) in order.iter().enumerate() {
                    inverse[r] = pos;
                }
                if inverse.contains(&usize::MAX) {
                    return Err(Error::shape("attention windows do not partition the rows"));
                }
                g.gather_rows(stacked, &inverse)?
            }
        };
        let a = self.proj.forward(g, ps, attn)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, ps, x)?;
        let f = self.fc1.forward(g, ps, h)?;
        let f = g.gelu(f);
        let f = self.fc2.forward(g, ps, f)?;
        g.add(x, f)
    }

    fn attend<T: Real>(&self, g: &mut Graph<T>, qkv: Var) -> Result<Var> {
        let dh = self.width / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let q = g.slice_cols(qkv, hd * dh, dh)?;
            let k = g.slice_cols(qkv, self.width + hd * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * self.width + hd * dh, dh)?;
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s);
            heads.push(g.matmul(p, v)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            g.concat_cols(&heads)
        }
    }
}

/// Sinusoidal features of a scalar position: `[sin(p w_i), cos(p w_i)]` with
/// geometrically spaced frequencies.
pub fn sincos(pos: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = 1.0 / 10_000f64.powf(i as f64 / half.max(1) as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    out
}

/// Row-major `(h*w) x width` table: first half encodes the row, second half
/// the column.
pub fn sincos_2d<T: Real>(h: usize, w: usize, width: usize) -> Result<Tensor<T>> {
    if !width.is_multiple_of(4) {
        return Err(Error::config(format!("2-D position width {width} must be a multiple of 4")));
    }
    let half = width / 2;
    let mut data = Vec::with_capacity(h * w * width);
    for i in 0..h {
        let ri = sincos(i as f64, half);
        for j in 0..w {
            let cj = sincos(j as f64, half);
            data.extend(ri.iter().chain(&cj).map(|&v| T::lit(v)));
        }
    }
    Tensor::new(&[h * w, width], data)
}

/// Partition of an `h x w` row-major grid into `win x win` windows. A nonzero
/// `shift` moves the window boundaries; edge windows are truncated.
pub fn grid_windows(h: usize, w: usize, win: usize, shift: usize) -> Vec<Vec<usize>> {
    let cuts = |n: usize| {
        let mut c = vec![0];
        let mut next = if shift.is_multiple_of(win) { win } else { shift % win };
        while next < n {
            c.push(next);
            next += win;
        }
        c.push(n);
        c
    };
    let rc = cuts(h);
    let cc = cuts(w);
    let mut out = Vec::new();
    for r in rc.windows(2) {
        for c in cc.windows(2) {
            let mut part = Vec::with_capacity((r[1] - r[0]) * (c[1] - c[0]));
            for i in r[0]..r[1] {
                for j in c[0]..c[1] {
                    part.push(i * w + j);
                }
            }
            out.push(part);
        }
    }
    out
}
