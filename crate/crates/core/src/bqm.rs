//! Binary spherical quantization: projection onto the unit sphere, sign
//! tokens, bit packing and storage accounting.
//!
//! Bit layout of a packed token grid: tokens in row-major grid order, the
//! `nb` components of each token in order, eight components per byte with the
//! first component in the most significant bit; `+1` is stored as `1` and `-1`
//! as `0`. A trailing partial byte is zero-padded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::vaeformer::PatchConfig;

/// Guard added to the norm before dividing.
pub const SPHERE_EPS: f64 = 1e-12;
/// Temperature of the soft bit probabilities in the entropy surrogate.
pub const ENTROPY_ALPHA: f64 = 10.0;

/// Bits per token; the implicit codebook has `2^nb` entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookSpec {
    pub nb: usize,
}

impl CodebookSpec {
    pub fn new(nb: usize) -> Result<Self> {
        if !(8..=256).contains(&nb) || !nb.is_multiple_of(8) {
            return Err(Error::config(format!("{nb} bits per token; need a multiple of 8 in [8, 256]")));
        }
        Ok(Self { nb })
    }

    /// `log2` of the codebook size.
    pub fn log2_size(&self) -> usize {
        self.nb
    }
}

/// `u / (|u| + eps)`.
pub fn sphere_project(u: &[f64]) -> Vec<f64> {
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter().map(|v| v / (n + SPHERE_EPS)).collect()
}

/// Sign per component with `sign(0) = +1`.
pub fn binary_quantize(u: &[f64]) -> Vec<i8> {
    u.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect()
}

/// `+-1 / sqrt(nb)` per component.
pub fn dequantize(tok: &[i8]) -> Vec<f64> {
    let s = 1.0 / (tok.len() as f64).sqrt();
    tok.iter().map(|&b| b as f64 * s).collect()
}

/// Straight-through rule: the upstream gradient passes through the sign
/// unchanged.
pub fn ste_gradient(upstream: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != u.len() {
        return Err(Error::shape(format!("gradient of {} for {} inputs", upstream.len(), u.len())));
    }
    Ok(upstream.to_vec())
}

/// How the quantizer behaves inside a differentiable graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantMode {
    /// Sign with straight-through gradient (training and inference).
    Sign,
    /// Skip the sign; used to check the smooth part of the model against
    /// finite differences.
    Bypass,
}

/// Sphere projection, sign and rescale on `tokens x nb` rows. Returns
/// `(v, q)` where `v` is the projected input and `q = sign(v) / sqrt(nb)`.
pub fn quantize_rows<T: Real>(g: &mut Graph<T>, u: Var, mode: QuantMode) -> (Var, Var) {
    let (_, nb) = g.dims(u);
    let v = g.l2_normalize_rows(u, SPHERE_EPS);
    let q = match mode {
        QuantMode::Sign => {
            let s = g.ste_sign(v);
            g.scale(s, T::lit(1.0 / (nb as f64).sqrt()))
        }
        QuantMode::Bypass => v,
    };
    (v, q)
}

/// Entropy surrogate over a batch of pre-quantization rows: summed over bits,
/// mean per-token entropy minus the entropy of the batch-mean probability.
pub fn entropy_reg<T: Real>(g: &mut Graph<T>, rows: Var) -> Result<Var> {
    g.entropy_reg(rows, ENTROPY_ALPHA)
}

/// Packed `H' x W'` grid of `nb`-bit tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentBits {
    pub h: usize,
    pub w: usize,
    pub nb: usize,
    pub payload: Vec<u8>,
}

impl LatentBits {
    pub fn payload_len(h: usize, w: usize, nb: usize) -> usize {
        (h * w * nb).div_ceil(8)
    }

    pub fn new(h: usize, w: usize, nb: usize, payload: Vec<u8>) -> Result<Self> {
        let expected = Self::payload_len(h, w, nb);
        if payload.len() != expected {
            return Err(Error::Truncated { expected: expected as u64, actual: payload.len() as u64 });
        }
        Ok(Self { h, w, nb, payload })
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn payload_bits(&self) -> u64 {
        (self.tokens() * self.nb) as u64
    }

    /// Component `b` of token `t` as a boolean (`true` for `+1`).
    pub fn bit(&self, t: usize, b: usize) -> bool {
        let i = t * self.nb + b;
        self.payload[i / 8] & (0x80 >> (i % 8)) != 0
    }

    /// Fraction of matching bits.
    pub fn agreement(&self, other: &Self) -> Result<f64> {
        if (self.h, self.w, self.nb) != (other.h, other.w, other.nb) {
            return Err(Error::shape("token grids differ in geometry"));
        }
        let total = self.payload_bits();
        let mut same = 0u64;
        for i in 0..total as usize {
            let m = 0x80 >> (i % 8);
            if (self.payload[i / 8] & m) == (other.payload[i / 8] & m) {
                same += 1;
            }
        }
        Ok(same as f64 / total as f64)
    }

    /// `tokens x nb` rows of `+-1 / sqrt(nb)`.
    pub fn dequantized<T: Real>(&self) -> Tensor<T> {
        let s = 1.0 / (self.nb as f64).sqrt();
        let signs = unpack_signs(self);
        Tensor::new(&[self.tokens(), self.nb], signs.iter().map(|&b| T::lit(b as f64 * s)).collect())
            .expect("shape")
    }

    /// `tokens x nb` rows of `{0, 1}` bit targets.
    pub fn targets<T: Real>(&self) -> Tensor<T> {
        let signs = unpack_signs(self);
        Tensor::new(
            &[self.tokens(), self.nb],
            signs.iter().map(|&b| if b > 0 { T::one() } else { T::zero() }).collect(),
        )
        .expect("shape")
    }
}

/// Packs `h * w` tokens of `nb` signs (token-major). Any non-negative entry
/// counts as `+1`.
pub fn pack_bits(h: usize, w: usize, nb: usize, signs: &[i8]) -> Result<LatentBits> {
    if signs.len() != h * w * nb {
        return Err(Error::shape(format!("{} signs for {h}x{w} tokens of {nb} bits", signs.len())));
    }
    let mut payload = vec![0u8; LatentBits::payload_len(h, w, nb)];
    for (i, &s) in signs.iter().enumerate() {
        if s >= 0 {
            payload[i / 8] |= 0x80 >> (i % 8);
        }
    }
    Ok(LatentBits { h, w, nb, payload })
}

/// Packs quantized rows (`tokens x nb`, any real sign pattern).
pub fn pack_rows<T: Real>(h: usize, w: usize, rows: &Tensor<T>) -> Result<LatentBits> {
    let (t, nb) = rows.dims2();
    if t != h * w {
        return Err(Error::shape(format!("{t} token rows for a {h}x{w} grid")));
    }
    let signs: Vec<i8> = rows.data().iter().map(|&v| if v >= T::zero() { 1 } else { -1 }).collect();
    pack_bits(h, w, nb, &signs)
}

/// Token-major signs of a packed grid.
pub fn unpack_signs(bits: &LatentBits) -> Vec<i8> {
    (0..bits.tokens() * bits.nb)
        .map(|i| if bits.payload[i / 8] & (0x80 >> (i % 8)) != 0 { 1 } else { -1 })
        .collect()
}

/// Validating inverse of [`pack_bits`].
pub fn unpack_bits(h: usize, w: usize, nb: usize, payload: &[u8]) -> Result<Vec<i8>> {
    let bits = LatentBits::new(h, w, nb, payload.to_vec())?;
    Ok(unpack_signs(&bits))
}

/// Storage accounting of one compressed field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub nb: usize,
    pub h_tokens: usize,
    pub w_tokens: usize,
    /// `C H W 32 / (nb H' W')`.
    pub ratio_exact: f64,
    /// `(C / nb) 32 sh sw`, the divisible-grid form.
    pub ratio_ideal: f64,
    /// `32 / ratio_exact`.
    pub bpsp: f64,
}

impl RatioReport {
    pub fn payload_bits(&self) -> u64 {
        (self.nb * self.h_tokens * self.w_tokens) as u64
    }

    pub fn raw_bits(&self) -> u64 {
        (self.c * self.h * self.w) as u64 * 32
    }
}

pub fn compression_ratio(c: usize, h: usize, w: usize, cfg: &PatchConfig, nb: usize) -> Result<RatioReport> {
    if c == 0 || nb == 0 {
        return Err(Error::config("channel and bit counts must be positive"));
    }
    let (hp, wp) = cfg.token_grid_shape(h, w)?;
    let raw = (c * h * w) as f64 * 32.0;
    let stored = (nb * hp * wp) as f64;
    let ratio_exact = raw / stored;
    let ratio_ideal = c as f64 / nb as f64 * 32.0 * (cfg.stride.0 * cfg.stride.1) as f64;
    Ok(RatioReport {
        c,
        h,
        w,
        nb,
        h_tokens: hp,
        w_tokens: wp,
        ratio_exact,
        ratio_ideal,
        bpsp: 32.0 / ratio_exact,
    })
}

/// Geometry-only ablation grid: one report per `(levels, nb)` pair, levels
/// outer, each level count standing for a single-variable subset.
pub fn geometry_sweep(levels: &[usize], nbs: &[usize], h: usize, w: usize, cfg: &PatchConfig) -> Result<Vec<RatioReport>> {
    let mut out = Vec::with_capacity(levels.len() * nbs.len());
    for &c in levels {
        for &nb in nbs {
            out.push(compression_ratio(c, h, w, cfg, nb)?);
        }
    }
    Ok(out)
}
