//! Forecasting on latent tokens and a pixel-space counterpart, with a shared
//! evaluation protocol that decodes to pixels only when scoring.
//!
//! The latent forecaster consumes dequantized `+-1/sqrt(nb)` token vectors
//! and emits per-bit logits; training sees [`LatentBits`] only.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bqm::{pack_rows, LatentBits};
use crate::error::{Error, Result};
use crate::griddata::synth::{synth_anomalies, to_physical};
use crate::griddata::{GridField, LatWeights, NormStats, PvsMeta, SynthParams};
use crate::metrics::{sedi_pooled, weighted_rmse_pooled, SEDI_EPS, SEDI_QUANTILES};
use crate::model::{load_params, Wla};
use crate::numerics::checkpoint::TensorFile;
use crate::numerics::nn::{grid_windows, sincos_2d, LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::numerics::{clip_global_norm, AdamW, Graph, ParamId, ParamStore, Real, Schedule, Tensor, Var};
use crate::pvum::{field_rows, rows_to_values};
use crate::train::batch_indices;
use crate::vaeformer::PatchConfig;

/// Zonal advection with stochastic forcing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    /// Eastward displacement per step, in pixels (periodic in longitude).
    pub shift_px: usize,
    /// Fraction of the advected anomaly kept per step; the rest is replaced
    /// by fresh noise of matching variance.
    pub memory: f64,
    pub synth: SynthParams,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self { shift_px: 6, memory: 0.95, synth: SynthParams::default() }
    }
}

/// `steps` consecutive fields: `a[t+1] = m shift(a[t]) + sqrt(1 - m^2) xi[t]`
/// in anomaly space, mapped to physical units per channel.
pub fn advective_sequence(
    meta: &PvsMeta,
    h: usize,
    w: usize,
    steps: usize,
    seed: u64,
    p: &DynamicsParams,
) -> Result<Vec<GridField>> {
    if h < 8 || w < 8 {
        return Err(Error::config(format!("grid {h}x{w} smaller than 8x8")));
    }
    if !(0.0..=1.0).contains(&p.memory) {
        return Err(Error::Range(format!("memory {} outside [0, 1]", p.memory)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = synth_anomalies(meta, h, w, p.synth, &mut rng);
    let innov = (1.0 - p.memory * p.memory).sqrt();
    let s = p.shift_px % w;
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            let xi = synth_anomalies(meta, h, w, p.synth, &mut rng);
            for (plane, noise) in a.iter_mut().zip(&xi) {
                let prev = plane.clone();
                for i in 0..h {
                    for j in 0..w {
                        let src = i * w + (j + w - s) % w;
                        plane[i * w + j] = p.memory * prev[src] + innov * noise[i * w + j];
                    }
                }
            }
        }
        let mut values = Vec::with_capacity(meta.len() * h * w);
        for (e, plane) in meta.entries().iter().zip(&a) {
            values.extend(plane.iter().map(|&v| to_physical(e, v) as f32));
        }
        out.push(GridField::on_default_grid(meta.clone(), h, w, values)?);
    }
    Ok(out)
}

/// Windowed attention backbone over a token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Side of the square attention window; odd blocks shift by half of it.
    pub window: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl WindowConfig {
    pub fn desk() -> Self {
        Self { window: 6, depth: 2, d_model: 64, heads: 4, mlp_ratio: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("window must be positive"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) || !self.d_model.is_multiple_of(4) {
            return Err(Error::config(format!(
                "d_model {} needs a multiple of 4 divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Rows of the 3x3 token neighbourhood side by side: `L x k` into `L x 9k`.
/// Columns wrap around (longitude), rows are zero-padded.
pub fn neighbourhood<T: Real>(g: &mut Graph<T>, x: Var, grid: (usize, usize)) -> Result<Var> {
    let (h, w) = grid;
    let (l, k) = g.dims(x);
    if l != h * w {
        return Err(Error::shape(format!("{l} rows for a {h}x{w} grid")));
    }
    let zero = g.constant(Tensor::zeros(&[1, k]));
    let padded = g.concat_rows(&[x, zero])?;
    let mut parts = Vec::with_capacity(9);
    for di in -1isize..=1 {
        for dj in -1isize..=1 {
            let idx: Vec<usize> = (0..l)
                .map(|r| {
                    let (i, j) = ((r / w) as isize + di, (r % w) as isize + dj);
                    if i < 0 || i >= h as isize {
                        l
                    } else {
                        i as usize * w + j.rem_euclid(w as isize) as usize
                    }
                })
                .collect();
            parts.push(g.gather_rows(padded, &idx)?);
        }
    }
    g.concat_cols(&parts)
}

#[derive(Clone, Debug, PartialEq)]
struct Backbone {
    grid: (usize, usize),
    cfg: WindowConfig,
    stem: Linear,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    head: Linear,
}

impl Backbone {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        name: &str,
        grid: (usize, usize),
        in_width: usize,
        out_width: usize,
        cfg: WindowConfig,
        head_std: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let stem = Linear::new(ps, rng, &format!("{name}.stem"), 9 * in_width, d, 1.0 / ((9 * in_width) as f64).sqrt());
        let out_std = INIT_STD / (2.0 * cfg.depth.max(1) as f64).sqrt();
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(ps, rng, &format!("{name}.block{i}"), d, cfg.heads, cfg.mlp_ratio, out_std))
            .collect::<Result<_>>()?;
        let ln = LayerNorm::new(ps, &format!("{name}.ln"), d);
        let head = Linear::new(ps, rng, &format!("{name}.head"), d, out_width, head_std);
        Ok(Self { grid, cfg, stem, blocks, ln, head })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (h, w) = self.grid;
        let n = neighbourhood(g, x, self.grid)?;
        let mut y = self.stem.forward(g, ps, n)?;
        if !self.blocks.is_empty() {
            let pe = g.constant(sincos_2d(h, w, self.cfg.d_model)?);
            y = g.add(y, pe)?;
            let win = self.cfg.window;
            let plain = grid_windows(h, w, win, 0);
            let shifted = grid_windows(h, w, win, win / 2);
            for (i, b) in self.blocks.iter().enumerate() {
                let parts = if i % 2 == 1 && win > 1 { &shifted } else { &plain };
                y = b.forward(g, ps, y, Some(parts))?;
            }
        }
        let y = self.ln.forward(g, ps, y)?;
        self.head.forward(g, ps, y)
    }
}

/// Optimizer settings shared by both forecasters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: u64,
    pub batch: usize,
    pub warmup: u64,
    pub lr_floor: f64,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub seed: u64,
}

impl FitConfig {
    pub fn desk() -> Self {
        Self { steps: 1_500, batch: 8, warmup: 75, lr_floor: 5e-5, lr_peak: 1e-3, weight_decay: 0.01, clip: 1.0, seed: 0 }
    }

    fn schedule(&self) -> Result<Schedule> {
        if self.batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Schedule { warmup_steps: self.warmup, total_steps: self.steps, lr_floor: self.lr_floor, lr_peak: self.lr_peak }
            .validated()
    }
}

/// Minibatch AdamW over `n` samples; gradients of a batch are reduced in
/// sample order. Returns the mean loss per step.
fn fit<F>(ps: &mut ParamStore<f32>, cfg: &FitConfig, n: usize, loss: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f32>, &ParamStore<f32>, usize) -> Result<Var> + Sync,
{
    if n == 0 {
        return Err(Error::config("no training samples"));
    }
    let schedule = cfg.schedule()?;
    let opt = AdamW::default();
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let lr = schedule.lr_at(step)?;
        let idx = batch_indices(cfg.seed, step, n, cfg.batch);
        let store: &ParamStore<f32> = ps;
        let parts: Vec<Result<(Vec<Tensor<f32>>, f64)>> = idx
            .par_iter()
            .map(|&i| {
                let mut g = Graph::new();
                let l = loss(&mut g, store, i)?;
                let v = g.value(l).data()[0] as f64;
                Ok((g.backward(l)?.for_params(store), v))
            })
            .collect();
        let mut acc: Option<Vec<Tensor<f32>>> = None;
        let mut total = 0.0;
        for p in parts {
            let (gs, v) = p?;
            total += v;
            match &mut acc {
                None => acc = Some(gs),
                Some(a) => a.iter_mut().zip(&gs).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let mut grads = acc.expect("non-empty batch");
        let inv = 1.0 / cfg.batch as f32;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
        let mean = total / cfg.batch as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { step, reason: format!("loss {mean}") });
        }
        clip_global_norm(&mut grads, cfg.clip);
        opt.step(ps, &grads, lr, cfg.weight_decay)?;
        curve.push(mean);
    }
    Ok(curve)
}

/// Input tokens at `t` and target tokens at `t + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForecastPair {
    pub input: LatentBits,
    pub target: LatentBits,
}

impl ForecastPair {
    pub fn new(input: LatentBits, target: LatentBits) -> Result<Self> {
        if (input.h, input.w, input.nb) != (target.h, target.w, target.nb) {
            return Err(Error::shape("forecast pair geometry differs"));
        }
        Ok(Self { input, target })
    }
}

/// Consecutive pairs of a token sequence.
pub fn pairs_from_sequence(seq: &[LatentBits]) -> Result<Vec<ForecastPair>> {
    seq.windows(2).map(|p| ForecastPair::new(p[0].clone(), p[1].clone())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    pub window: WindowConfig,
    pub grid: (usize, usize),
    pub nb: usize,
    /// Initial logit magnitude of the identity skip path.
    pub copy_gain: f64,
    /// Standard deviation of the output head at initialization.
    pub head_std: f64,
    pub seed: u64,
}

impl ForecasterConfig {
    pub fn desk(grid: (usize, usize), nb: usize) -> Self {
        Self { window: WindowConfig::desk(), grid, nb, copy_gain: 0.0, head_std: INIT_STD, seed: 0 }
    }
}

/// Per-bit logits from a token grid: backbone output plus a linear skip
/// from the input token.
#[derive(Clone, Debug)]
pub struct Forecaster {
    pub config: ForecasterConfig,
    pub params: ParamStore<f32>,
    backbone: Backbone,
    skip: ParamId,
}

impl Forecaster {
    pub fn new(config: ForecasterConfig) -> Result<Self> {
        if config.nb == 0 || config.grid.0 * config.grid.1 == 0 {
            return Err(Error::config("empty token geometry"));
        }
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone =
            Backbone::new(&mut ps, &mut rng, "fc", config.grid, config.nb, config.nb, config.window, config.head_std)?;
        let gain = (config.copy_gain * (config.nb as f64).sqrt()) as f32;
        let skip = ps.add("fc.skip", Tensor::eye(config.nb).map(|v| v * gain), false);
        Ok(Self { config, params: ps, backbone, skip })
    }

    /// Zero-depth model whose logits are `gain * sign(input)`.
    pub fn persistence(grid: (usize, usize), nb: usize) -> Result<Self> {
        let mut cfg = ForecasterConfig::desk(grid, nb);
        cfg.window.depth = 0;
        cfg.copy_gain = 4.0;
        cfg.head_std = 0.0;
        Self::new(cfg)
    }

    fn check(&self, bits: &LatentBits) -> Result<()> {
        if (bits.h, bits.w, bits.nb) != (self.config.grid.0, self.config.grid.1, self.config.nb) {
            return Err(Error::shape(format!(
                "tokens {}x{}x{}, forecaster expects {}x{}x{}",
                bits.h, bits.w, bits.nb, self.config.grid.0, self.config.grid.1, self.config.nb
            )));
        }
        Ok(())
    }

    /// `tokens x nb` logits for dequantized input rows.
    pub fn logits_graph<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, q: Var) -> Result<Var> {
        let y = self.backbone.forward(g, ps, q)?;
        let s = g.param(ps, self.skip);
        let c = g.matmul(q, s)?;
        g.add(y, c)
    }

    /// Logits in row-major `H' x W' x nb` order.
    pub fn forward(&self, input: &LatentBits) -> Result<Tensor<f32>> {
        self.check(input)?;
        let mut g = Graph::new();
        let q = g.constant(input.dequantized());
        let out = self.logits_graph(&mut g, &self.params, q)?;
        let t = g.value(out).clone();
        if !t.is_finite() {
            return Err(Error::NonFinite("forecaster logits".into()));
        }
        Ok(t)
    }

    /// Next tokens; a bit is `+1` where its logit is non-negative.
    pub fn predict(&self, input: &LatentBits) -> Result<LatentBits> {
        pack_rows(input.h, input.w, &self.forward(input)?)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let tensors = self.params.names().iter().cloned().zip(self.params.values().iter().cloned()).collect();
        TensorFile { meta: serde_json::json!({ "kind": "forecaster", "config": self.config }), tensors }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let cfg = file.meta.get("config").ok_or_else(|| Error::Missing("forecaster config".into()))?;
        let mut f = Self::new(serde_json::from_value(cfg.clone())?)?;
        load_params(&mut f.params, file)?;
        Ok(f)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

/// Mean binary cross-entropy of logits against target tokens (`-1 -> 0`,
/// `+1 -> 1`).
pub fn bce_loss<T: Real>(g: &mut Graph<T>, logits: Var, target: &LatentBits) -> Result<Var> {
    g.bce_logits(logits, &target.targets())
}

/// Trains on token pairs only. Returns the per-step loss curve.
pub fn train_forecaster(model: &mut Forecaster, cfg: &FitConfig, pairs: &[ForecastPair]) -> Result<Vec<f64>> {
    for p in pairs {
        model.check(&p.input)?;
        model.check(&p.target)?;
    }
    let inputs: Vec<Tensor<f32>> = pairs.iter().map(|p| p.input.dequantized()).collect();
    let targets: Vec<Tensor<f32>> = pairs.iter().map(|p| p.target.targets()).collect();
    let this = model.clone();
    fit(&mut model.params, cfg, pairs.len(), |g, ps, i| {
        let q = g.constant(inputs[i].clone());
        let z = this.logits_graph(g, ps, q)?;
        g.bce_logits(z, &targets[i])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelConfig {
    pub meta: PvsMeta,
    pub height: usize,
    pub width: usize,
    pub patch: PatchConfig,
    pub window: WindowConfig,
    pub seed: u64,
}

impl PixelConfig {
    pub fn desk(meta: PvsMeta, height: usize, width: usize) -> Self {
        Self { meta, height, width, patch: PatchConfig::desk(), window: WindowConfig::desk(), seed: 0 }
    }
}

/// Pixel-space counterpart: patch extraction, the same backbone, patch
/// folding and a residual connection to the input.
#[derive(Clone, Debug)]
pub struct PixelForecaster {
    pub config: PixelConfig,
    pub params: ParamStore<f32>,
    pub norm: NormStats,
    backbone: Backbone,
}

impl PixelForecaster {
    pub fn new(config: PixelConfig, norm: NormStats) -> Result<Self> {
        if norm.channels() != config.meta.len() {
            return Err(Error::shape("normalization channels differ from the subset"));
        }
        config.patch.check_coverage(config.height, config.width)?;
        let layout = config.patch.layout(config.height, config.width, config.meta.len())?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tw = layout.token_width();
        let backbone = Backbone::new(&mut ps, &mut rng, "px", layout.grid, tw, tw, config.window, INIT_STD)?;
        Ok(Self { config, params: ps, norm, backbone })
    }

    fn graph<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = &self.config;
        let layout = c.patch.layout(c.height, c.width, c.meta.len())?;
        let p = g.im2col(x, layout)?;
        let y = self.backbone.forward(g, ps, p)?;
        let d = g.fold_avg(y, layout)?;
        g.add(x, d)
    }

    fn check(&self, x: &GridField) -> Result<()> {
        let c = &self.config;
        if x.meta() != &c.meta || (x.height(), x.width()) != (c.height, c.width) {
            return Err(Error::Mismatch(format!("field {} {}x{} does not match the model", x.meta(), x.height(), x.width())));
        }
        Ok(())
    }

    /// One step in physical units.
    pub fn step(&self, x: &GridField) -> Result<GridField> {
        self.check(x)?;
        let mut g = Graph::new();
        let xv = g.constant(field_rows(&self.norm.normalize(x)?));
        let y = self.graph(&mut g, &self.params, xv)?;
        if !g.value(y).is_finite() {
            return Err(Error::NonFinite("pixel forecast".into()));
        }
        let out = x.with_values(x.meta().clone(), rows_to_values(g.value(y)))?;
        self.norm.denormalize(&out)
    }

    /// Trains on consecutive fields of `seq` (physical units) with a
    /// latitude-weighted MSE in normalized space.
    pub fn train(&mut self, cfg: &FitConfig, seq: &[GridField]) -> Result<Vec<f64>> {
        if seq.len() < 2 {
            return Err(Error::config("need at least two consecutive fields"));
        }
        for x in seq {
            self.check(x)?;
        }
        let rows: Vec<Tensor<f32>> =
            seq.iter().map(|x| Ok(field_rows(&self.norm.normalize(x)?))).collect::<Result<_>>()?;
        let weights: Vec<f32> =
            LatWeights::from_lats(seq[0].lats())?.per_pixel(self.config.width).into_iter().map(|v| v as f32).collect();
        let this = self.clone();
        fit(&mut self.params, cfg, seq.len() - 1, |g, ps, i| {
            let x = g.constant(rows[i].clone());
            let y = this.graph(g, ps, x)?;
            g.weighted_mse(y, &rows[i + 1], &weights)
        })
    }
}

/// A predicted state: the decoded field and, when available, its tokens.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub field: GridField,
    pub bits: LatentBits,
}

/// Something that rolls a state forward for evaluation.
pub trait ForecastModel: Sync {
    fn name(&self) -> String;

    /// Predictions for leads `0..=leads` from the tokens and pixel state at
    /// the initial time.
    fn rollout(&self, init_bits: &LatentBits, init_field: &GridField, wla: &Wla, leads: usize)
        -> Result<Vec<Prediction>>;
}

/// Repeats the initial tokens.
#[derive(Clone, Copy, Debug, Default)]
pub struct Persistence;

impl ForecastModel for Persistence {
    fn name(&self) -> String {
        "persistence".into()
    }

    fn rollout(&self, b: &LatentBits, _: &GridField, wla: &Wla, leads: usize) -> Result<Vec<Prediction>> {
        let field = wla.decode(b)?;
        Ok(vec![Prediction { field, bits: b.clone() }; leads + 1])
    }
}

/// Latent forecaster under a display name.
pub struct LatentModel<'a> {
    pub name: String,
    pub model: &'a Forecaster,
}

impl ForecastModel for LatentModel<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn rollout(&self, b: &LatentBits, _: &GridField, wla: &Wla, leads: usize) -> Result<Vec<Prediction>> {
        let mut bits = b.clone();
        let mut out = Vec::with_capacity(leads + 1);
        for k in 0..=leads {
            if k > 0 {
                bits = self.model.predict(&bits)?;
            }
            out.push(Prediction { field: wla.decode(&bits)?, bits: bits.clone() });
        }
        Ok(out)
    }
}

pub struct PixelModel<'a> {
    pub name: String,
    pub model: &'a PixelForecaster,
}

impl ForecastModel for PixelModel<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn rollout(&self, _: &LatentBits, x: &GridField, wla: &Wla, leads: usize) -> Result<Vec<Prediction>> {
        let mut field = x.clone();
        let mut out = Vec::with_capacity(leads + 1);
        for k in 0..=leads {
            if k > 0 {
                field = self.model.step(&field)?;
            }
            out.push(Prediction { bits: wla.encode(&field)?, field: field.clone() });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub lead: usize,
    pub model: String,
    pub channel: String,
    pub rmse: f64,
    /// One entry per threshold in [`SEDI_QUANTILES`].
    pub sedi: Vec<Option<f64>>,
    pub bit_accuracy: f64,
    /// False when any rollout produced non-finite values at this lead.
    pub finite: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub rows: Vec<ForecastRow>,
}

pub const REPORT_HEADER: &str = "lead,model,channel,rmse,sedi@90,sedi@95,sedi@98,sedi@99,bit_accuracy,finite";

impl ForecastReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let sedi: Vec<String> = r.sedi.iter().map(|v| v.map_or(String::new(), |x| format!("{x:.6}"))).collect();
            s.push_str(&format!(
                "{},{},{},{:.6},{},{:.6},{}\n",
                r.lead,
                r.model,
                r.channel,
                r.rmse,
                sedi.join(","),
                r.bit_accuracy,
                r.finite
            ));
        }
        s
    }

    pub fn rows_for<'a>(&'a self, model: &'a str, lead: usize) -> impl Iterator<Item = &'a ForecastRow> + 'a {
        self.rows.iter().filter(move |r| r.model == model && r.lead == lead)
    }

    /// Per-channel RMSE of `model` at `lead`, in channel order.
    pub fn rmse(&self, model: &str, lead: usize) -> Vec<f64> {
        self.rows_for(model, lead).map(|r| r.rmse).collect()
    }

    pub fn merge(&mut self, other: ForecastReport) {
        self.rows.extend(other.rows);
    }
}

/// Rolls every model out from each initial index in `inits` and scores leads
/// `0..=leads` against `truth`, which holds the pixel fields aligned with
/// the token sequence `bits`.
pub fn evaluate_forecast(
    models: &[&dyn ForecastModel],
    wla: &Wla,
    bits: &[LatentBits],
    truth: &[GridField],
    inits: &[usize],
    leads: usize,
) -> Result<ForecastReport> {
    if bits.len() != truth.len() {
        return Err(Error::shape(format!("{} token grids for {} fields", bits.len(), truth.len())));
    }
    if inits.is_empty() {
        return Err(Error::config("no initial times"));
    }
    if let Some(&t) = inits.iter().find(|&&t| t + leads >= bits.len()) {
        return Err(Error::Range(format!("initial time {t} + {leads} leads beyond the sequence")));
    }
    let weights = LatWeights::from_lats(truth[0].lats())?;
    let channels: Vec<String> = truth[0].meta().entries().iter().map(|e| e.to_string()).collect();
    let mut report = ForecastReport::default();
    for m in models {
        let runs: Vec<Result<Vec<Prediction>>> =
            inits.par_iter().map(|&t| m.rollout(&bits[t], &truth[t], wla, leads)).collect();
        let runs: Vec<Vec<Prediction>> = runs.into_iter().collect::<Result<_>>()?;
        for k in 0..=leads {
            let pairs: Vec<(GridField, GridField)> =
                runs.iter().zip(inits).map(|(r, &t)| (r[k].field.clone(), truth[t + k].clone())).collect();
            let finite = pairs.iter().all(|(p, _)| p.values().iter().all(|v| v.is_finite()));
            let mut acc = 0.0;
            for (r, &t) in runs.iter().zip(inits) {
                acc += r[k].bits.agreement(&bits[t + k])?;
            }
            let bit_accuracy = acc / inits.len() as f64;
            let (rmse, sedi) = if finite {
                (weighted_rmse_pooled(&pairs, &weights)?, Some(sedi_pooled(&pairs, &SEDI_QUANTILES, SEDI_EPS)?))
            } else {
                (vec![f64::NAN; channels.len()], None)
            };
            for (c, name) in channels.iter().enumerate() {
                report.rows.push(ForecastRow {
                    lead: k,
                    model: m.name(),
                    channel: name.clone(),
                    rmse: rmse[c],
                    sedi: SEDI_QUANTILES
                        .iter()
                        .map(|&q| sedi.as_ref().and_then(|s| s.score(c, q)).and_then(|s| s.sedi))
                        .collect(),
                    bit_accuracy,
                    finite,
                });
            }
        }
    }
    Ok(report)
}

/// Trains the pixel counterpart on `train_seq` and scores it (with
/// persistence) under the same protocol as the latent model.
#[allow(clippy::too_many_arguments)]
pub fn pixel_baseline(
    config: PixelConfig,
    fit_cfg: &FitConfig,
    train_seq: &[GridField],
    wla: &Wla,
    test_bits: &[LatentBits],
    test_truth: &[GridField],
    inits: &[usize],
    leads: usize,
) -> Result<(PixelForecaster, ForecastReport)> {
    let norm = NormStats::fit(train_seq)?;
    let mut model = PixelForecaster::new(config, norm)?;
    model.train(fit_cfg, train_seq)?;
    let px = PixelModel { name: "pixel".into(), model: &model };
    let report = evaluate_forecast(&[&px, &Persistence], wla, test_bits, test_truth, inits, leads)?;
    Ok((model, report))
}
