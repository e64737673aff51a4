//! Overlapping patch embedding, transformer stacks over the token grid and the
//! coverage-averaged inverse.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{sincos_2d, LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::numerics::{Graph, ParamStore, PatchLayout, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// `(ph, pw)`.
    pub patch: (usize, usize),
    /// `(sh, sw)`.
    pub stride: (usize, usize),
    /// `(qh, qw)` zero padding on each side.
    pub pad: (usize, usize),
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self::era5()
    }
}

impl PatchConfig {
    /// 15x14 patches, stride 10, padding 2 (the 0.25 degree global grid).
    pub fn era5() -> Self {
        Self { patch: (15, 14), stride: (10, 10), pad: (2, 2) }
    }

    /// 8x8 patches, stride 6, padding 2 for 64x64 grids.
    pub fn desk() -> Self {
        Self { patch: (8, 8), stride: (6, 6), pad: (2, 2) }
    }

    pub fn validate(&self) -> Result<()> {
        let (ph, pw) = self.patch;
        let (sh, sw) = self.stride;
        let (qh, qw) = self.pad;
        if sh == 0 || sw == 0 || ph == 0 || pw == 0 {
            return Err(Error::config("patch and stride must be positive"));
        }
        if ph < sh || pw < sw {
            return Err(Error::config(format!("patch {:?} smaller than stride {:?}", self.patch, self.stride)));
        }
        if qh >= ph || qw >= pw {
            return Err(Error::config(format!("padding {:?} not smaller than patch {:?}", self.pad, self.patch)));
        }
        Ok(())
    }

    /// `(H', W')` with `H' = floor((H + 2 qh - ph) / sh) + 1`.
    pub fn token_grid_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (ph, pw) = self.patch;
        let (sh, sw) = self.stride;
        let (qh, qw) = self.pad;
        if h + 2 * qh < ph || w + 2 * qw < pw {
            return Err(Error::config(format!("grid {h}x{w} smaller than one {ph}x{pw} patch")));
        }
        Ok(((h + 2 * qh - ph) / sh + 1, (w + 2 * qw - pw) / sw + 1))
    }

    pub fn layout(&self, h: usize, w: usize, channels: usize) -> Result<PatchLayout> {
        let grid = self.token_grid_shape(h, w)?;
        Ok(PatchLayout {
            height: h,
            width: w,
            channels,
            patch: self.patch,
            stride: self.stride,
            pad: self.pad,
            grid,
        })
    }

    /// Errors when some pixel of an `h x w` grid lies in no patch, which
    /// happens when the stride leaves a remainder at the far edge.
    pub fn check_coverage(&self, h: usize, w: usize) -> Result<()> {
        let layout = self.layout(h, w, 1)?;
        if let Some(p) = layout.coverage().iter().position(|&c| c == 0) {
            return Err(Error::config(format!(
                "{h}x{w} grid: pixel ({}, {}) is not covered by any {:?} patch",
                p / w,
                p % w,
                self.patch
            )));
        }
        Ok(())
    }
}

/// Free function form of [`PatchConfig::token_grid_shape`].
pub fn token_grid_shape(h: usize, w: usize, cfg: &PatchConfig) -> Result<(usize, usize)> {
    cfg.token_grid_shape(h, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl StackConfig {
    /// 16-layer encoder, 32-layer decoder.
    pub fn era5() -> Self {
        Self { encoder_depth: 16, decoder_depth: 32, d_model: 768, heads: 12, mlp_ratio: 4 }
    }

    pub fn desk() -> Self {
        Self { encoder_depth: 4, decoder_depth: 8, d_model: 128, heads: 4, mlp_ratio: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_depth < self.encoder_depth {
            return Err(Error::config(format!(
                "decoder depth {} below encoder depth {}",
                self.decoder_depth, self.encoder_depth
            )));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if !self.d_model.is_multiple_of(4) {
            return Err(Error::config("d_model must be a multiple of 4 for 2-D position codes"));
        }
        Ok(())
    }
}

/// Linear projection of each padded `ph x pw x C` window to one token.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: PatchConfig,
    pub channels: usize,
}

impl PatchEmbed {
    pub fn new<R: Rng>(
        ps: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        patch: PatchConfig,
        channels: usize,
        d_model: usize,
    ) -> Result<Self> {
        patch.validate()?;
        let fan_in = patch.patch.0 * patch.patch.1 * channels;
        let proj = Linear::new(ps, rng, name, fan_in, d_model, 1.0 / (fan_in as f64).sqrt());
        Ok(Self { proj, patch, channels })
    }

    /// `(H*W) x C` rows to `(H'*W') x d` tokens.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, h: usize, w: usize) -> Result<Var> {
        let cols = patchify(g, x, &self.patch, h, w)?;
        self.proj.forward(g, ps, cols)
    }
}

/// Zero-padded window extraction only: `(H*W) x C` to `(H'*W') x (ph*pw*C)`.
pub fn patchify<T: Real>(g: &mut Graph<T>, x: Var, cfg: &PatchConfig, h: usize, w: usize) -> Result<Var> {
    let (_, c) = g.dims(x);
    let layout = cfg.layout(h, w, c)?;
    g.im2col(x, layout)
}

/// Coverage-averaged placement of per-token patches back onto the `h x w`
/// grid: `(H'*W') x (ph*pw*C)` to `(H*W) x C`.
pub fn unpatchify<T: Real>(
    g: &mut Graph<T>,
    patches: Var,
    cfg: &PatchConfig,
    h: usize,
    w: usize,
    channels: usize,
) -> Result<Var> {
    let layout = cfg.layout(h, w, channels)?;
    g.fold_avg(patches, layout)
}

/// Projection of each token to a `ph x pw x C` patch followed by
/// [`unpatchify`].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchExpand {
    pub proj: Linear,
    pub patch: PatchConfig,
    pub channels: usize,
}

impl PatchExpand {
    pub fn new<R: Rng>(
        ps: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        patch: PatchConfig,
        channels: usize,
        d_model: usize,
    ) -> Result<Self> {
        patch.validate()?;
        let fan_out = patch.patch.0 * patch.patch.1 * channels;
        let proj = Linear::new(ps, rng, name, d_model, fan_out, 1.0 / (d_model as f64).sqrt());
        Ok(Self { proj, patch, channels })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
        let patches = self.proj.forward(g, ps, tokens)?;
        unpatchify(g, patches, &self.patch, h, w, self.channels)
    }
}

/// Transformer blocks over an `H' x W'` token grid with 2-D sinusoidal
/// positions. Depth zero is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStack {
    pub blocks: Vec<TransformerBlock>,
    pub ln: Option<LayerNorm>,
    pub d_model: usize,
}

impl TokenStack {
    pub fn new<R: Rng>(
        ps: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        depth: usize,
        cfg: &StackConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        // residual branches scaled down with depth
        let out_std = INIT_STD / (2.0 * depth.max(1) as f64).sqrt();
        let blocks = (0..depth)
            .map(|i| {
                TransformerBlock::new(ps, rng, &format!("{name}.block{i}"), cfg.d_model, cfg.heads, cfg.mlp_ratio, out_std)
            })
            .collect::<Result<Vec<_>>>()?;
        let ln = (depth > 0).then(|| LayerNorm::new(ps, &format!("{name}.ln"), cfg.d_model));
        Ok(Self { blocks, ln, d_model: cfg.d_model })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, grid: (usize, usize)) -> Result<Var> {
        let (rows, d) = g.dims(x);
        if d != self.d_model || rows != grid.0 * grid.1 {
            return Err(Error::shape(format!(
                "token stack of width {} on a {}x{} grid given {rows}x{d}",
                self.d_model, grid.0, grid.1
            )));
        }
        if self.blocks.is_empty() {
            return Ok(x);
        }
        let pe = g.constant(sincos_2d(grid.0, grid.1, d)?);
        let mut h = g.add(x, pe)?;
        for b in &self.blocks {
            h = b.forward(g, ps, h, None)?;
        }
        let out = self.ln.as_ref().expect("present when depth > 0").forward(g, ps, h)?;
        if !g.value(out).is_finite() {
            return Err(Error::NonFinite("token stack activations".into()));
        }
        Ok(out)
    }
}
