//! Pressure-variable unification.
//!
//! A small transformer reads the metadata of a channel subset and emits the
//! weights of a linear map between that subset and a fixed number of unified
//! channels. Tokens depend only on the content of each metadata entry (learned
//! variable embedding plus a sinusoidal code of log-pressure), and the
//! transformer uses no sequence positions, so the generated rows follow any
//! reordering of the subset.
//!
//! Two instances are used: the forward one produces `W (C1 x C2)` and
//! `b (C2)` from the class token; the inverse one produces `W'^T (C1 x C2)`
//! and a per-channel bias `b' (C1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::griddata::{GridField, Level, MetaEntry, PvsMeta, VariableId};
use crate::numerics::nn::{sincos, LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::numerics::params::normal_tensor;
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Scale applied to `ln(1000 / p)` before the sinusoidal code.
const LOG_PRESSURE_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PvumConfig {
    /// Token width.
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Unified channel count.
    pub c2: usize,
    pub mlp_ratio: usize,
}

impl PvumConfig {
    pub fn desk() -> Self {
        Self { d: 32, blocks: 2, heads: 2, c2: 16, mlp_ratio: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.c2 == 0 {
            return Err(Error::config("pvum widths must be positive"));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!("pvum width {} not divisible by {} heads", self.d, self.heads)));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::config("pvum width must be even"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapRole {
    /// Subset channels to unified channels.
    Forward,
    /// Unified channels back to subset channels.
    Inverse,
}

/// `(C1 + 1) x d` embedding sequence; row 0 is the class token.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaTokens(pub Tensor<f32>);

impl MetaTokens {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generated linear map. Forward role: `w` is `C1 x C2`, `b` has `C2`
/// entries. Inverse role: `w` holds `W'^T` (`C1 x C2`), `b` has `C1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveMap {
    pub role: MapRole,
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

impl AdaptiveMap {
    pub fn c1(&self) -> usize {
        self.w.rows()
    }

    pub fn c2(&self) -> usize {
        self.w.cols()
    }
}

/// Sinusoidal code of a pressure level; zero for single-level entries, which
/// get a learned vector instead.
pub fn level_code(level: Level, d: usize) -> Vec<f64> {
    match level {
        Level::Hpa(p) => sincos(LOG_PRESSURE_SCALE * (1000.0 / p as f64).ln(), d),
        Level::Surface => vec![0.0; d],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaHypernet {
    pub role: MapRole,
    pub cfg: PvumConfig,
    var_table: ParamId,
    level_proj: Linear,
    surface: ParamId,
    cls: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    bias_head: Linear,
    weight_head: Linear,
}

impl MetaHypernet {
    pub fn new<R: Rng>(
        ps: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        cfg: PvumConfig,
        role: MapRole,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let n_vars = VariableId::ALL.len();
        let var_table = ps.add(format!("{name}.var_table"), normal_tensor(rng, &[n_vars, d], 0.5), false);
        let level_proj = Linear::new(ps, rng, &format!("{name}.level_proj"), d, d, 1.0 / (d as f64).sqrt());
        let surface = ps.add(format!("{name}.surface"), normal_tensor(rng, &[1, d], 0.5), false);
        let cls = ps.add(format!("{name}.cls"), normal_tensor(rng, &[1, d], 0.5), false);
        let blocks = (0..cfg.blocks)
            .map(|i| TransformerBlock::new(ps, rng, &format!("{name}.block{i}"), d, cfg.heads, cfg.mlp_ratio, INIT_STD))
            .collect::<Result<Vec<_>>>()?;
        let ln = LayerNorm::new(ps, &format!("{name}.ln"), d);
        let bias_out = match role {
            MapRole::Forward => cfg.c2,
            MapRole::Inverse => 1,
        };
        let bias_head = Linear::new(ps, rng, &format!("{name}.bias_head"), d, bias_out, INIT_STD);
        let weight_head = Linear::new(ps, rng, &format!("{name}.weight_head"), d, cfg.c2, 1.0 / d as f64);
        Ok(Self { role, cfg, var_table, level_proj, surface, cls, blocks, ln, bias_head, weight_head })
    }

    /// Token sequence before the transformer, `(C1 + 1) x d`.
    pub fn tokens<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, meta: &PvsMeta) -> Result<Var> {
        self.entry_tokens(g, ps, meta.entries())
    }

    fn entry_tokens<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, entries: &[MetaEntry]) -> Result<Var> {
        let d = self.cfg.d;
        let c1 = entries.len();
        if c1 == 0 {
            return Err(Error::config("empty pressure-variable subset"));
        }
        let ordinals: Vec<usize> = entries.iter().map(|e| e.variable.ordinal()).collect();
        let table = g.param(ps, self.var_table);
        let var_emb = g.gather_rows(table, &ordinals)?;

        let mut codes = Vec::with_capacity(c1 * d);
        let mut is_surface = Vec::with_capacity(c1);
        for e in entries {
            codes.extend(level_code(e.level, d).into_iter().map(T::lit));
            is_surface.push(if e.level == Level::Surface { T::one() } else { T::zero() });
        }
        let codes = g.constant(Tensor::new(&[c1, d], codes)?);
        let lvl = self.level_proj.forward(g, ps, codes)?;
        let mask = g.constant(Tensor::new(&[c1, 1], is_surface)?);
        let surface = g.param(ps, self.surface);
        let surf = g.matmul(mask, surface)?;
        let lvl = g.add(lvl, surf)?;
        let body = g.add(var_emb, lvl)?;
        let cls = g.param(ps, self.cls);
        g.concat_rows(&[cls, body])
    }

    pub fn embed_metadata(&self, ps: &ParamStore<f32>, meta: &PvsMeta) -> Result<MetaTokens> {
        let mut g = Graph::new();
        let t = self.tokens(&mut g, ps, meta)?;
        Ok(MetaTokens(g.value(t).clone()))
    }

    /// Weight and bias nodes of the generated map.
    pub fn mapping<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, meta: &PvsMeta) -> Result<(Var, Var)> {
        self.entry_mapping(g, ps, meta.entries())
    }

    fn entry_mapping<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, entries: &[MetaEntry]) -> Result<(Var, Var)> {
        let mut h = self.entry_tokens(g, ps, entries)?;
        for b in &self.blocks {
            h = b.forward(g, ps, h, None)?;
        }
        let h = self.ln.forward(g, ps, h)?;
        let c1 = entries.len();
        let cls = g.slice_rows(h, 0, 1)?;
        let body = g.slice_rows(h, 1, c1)?;
        let w = self.weight_head.forward(g, ps, body)?;
        let b = match self.role {
            MapRole::Forward => self.bias_head.forward(g, ps, cls)?,
            MapRole::Inverse => {
                let col = self.bias_head.forward(g, ps, body)?;
                g.transpose(col)
            }
        };
        Ok((w, b))
    }

    pub fn generate_mapping(&self, ps: &ParamStore<f32>, meta: &PvsMeta) -> Result<AdaptiveMap> {
        self.generate_for_entries(ps, meta.entries())
    }

    /// Map for a raw entry list. Unlike [`PvsMeta`] the list may repeat
    /// entries; repeated entries get identical rows.
    pub fn generate_for_entries(&self, ps: &ParamStore<f32>, entries: &[MetaEntry]) -> Result<AdaptiveMap> {
        let mut g = Graph::new();
        let (w, b) = self.entry_mapping(&mut g, ps, entries)?;
        let n = g.value(b).len();
        Ok(AdaptiveMap { role: self.role, w: g.value(w).clone(), b: g.value(b).clone().reshape(&[n])? })
    }

    /// Applies the generated map to `x`: `L x C1 -> L x C2` for the forward
    /// role, `L x C2 -> L x C1` for the inverse role.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, meta: &PvsMeta, x: Var) -> Result<Var> {
        let (w, b) = self.mapping(g, ps, meta)?;
        apply_map(g, self.role, x, w, b)
    }

    /// Decoder-side inverse of unified features `y` (`L x C2`) into a
    /// normalized field on the default `h x w` grid.
    pub fn unify_inverse(
        &self,
        ps: &ParamStore<f32>,
        y: &Tensor<f32>,
        meta: &PvsMeta,
        h: usize,
        w: usize,
    ) -> Result<GridField> {
        if self.role != MapRole::Inverse {
            return Err(Error::config("unify_inverse needs the inverse hypernetwork"));
        }
        let map = self.generate_mapping(ps, meta)?;
        inverse_with_map(y, &map, meta, h, w)
    }
}

fn apply_map<T: Real>(g: &mut Graph<T>, role: MapRole, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = match role {
        MapRole::Forward => g.matmul(x, w)?,
        MapRole::Inverse => g.matmul_nt(x, w)?,
    };
    g.add_row(y, b)
}

/// `(C, H, W)` channel-major values as `(H*W) x C` rows.
pub fn field_rows<T: Real>(x: &GridField) -> Tensor<T> {
    let (c, l) = (x.channels(), x.plane_len());
    let v = x.values();
    let mut out = vec![T::zero(); l * c];
    for ch in 0..c {
        for p in 0..l {
            out[p * c + ch] = T::lit(v[ch * l + p] as f64);
        }
    }
    Tensor::new(&[l, c], out).expect("shape")
}

/// Inverse of [`field_rows`].
pub fn rows_to_values<T: Real>(rows: &Tensor<T>) -> Vec<f32> {
    let (l, c) = rows.dims2();
    let d = rows.data();
    let mut out = vec![0f32; l * c];
    for p in 0..l {
        for ch in 0..c {
            out[ch * l + p] = d[p * c + ch].f64() as f32;
        }
    }
    out
}

/// `Y = X W + b` with `X` the `(H*W) x C1` reshape of a normalized field.
pub fn unify_forward(x: &GridField, map: &AdaptiveMap) -> Result<Tensor<f32>> {
    if map.role != MapRole::Forward {
        return Err(Error::config("unify_forward needs a forward map"));
    }
    if x.channels() != map.c1() {
        return Err(Error::shape(format!("field has {} channels, map expects {}", x.channels(), map.c1())));
    }
    let mut g = Graph::<f32>::new();
    let xv = g.constant(field_rows(x));
    let w = g.constant(map.w.clone());
    let b = g.constant(map.b.clone());
    let y = apply_map(&mut g, MapRole::Forward, xv, w, b)?;
    Ok(g.value(y).clone())
}

/// `X = Y W' + b'` reshaped to `(C1, H, W)`.
pub fn inverse_with_map(y: &Tensor<f32>, map: &AdaptiveMap, meta: &PvsMeta, h: usize, w: usize) -> Result<GridField> {
    if map.role != MapRole::Inverse {
        return Err(Error::config("inverse mapping needs an inverse map"));
    }
    let (l, c2) = y.dims2();
    if l != h * w || c2 != map.c2() || map.c1() != meta.len() {
        return Err(Error::shape(format!(
            "unified feature {l}x{c2} for a {h}x{w} grid and map {}x{}",
            map.c1(),
            map.c2()
        )));
    }
    let mut g = Graph::<f32>::new();
    let yv = g.constant(y.clone());
    let wv = g.constant(map.w.clone());
    let bv = g.constant(map.b.clone());
    let x = apply_map(&mut g, MapRole::Inverse, yv, wv, bv)?;
    GridField::on_default_grid(meta.clone(), h, w, rows_to_values(g.value(x)))
}

/// Cosine similarity between generated rows `i` and `j` of a map.
pub fn row_cosine(map: &AdaptiveMap, i: usize, j: usize) -> f64 {
    let a = map.w.row(i);
    let b = map.w.row(j);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}
