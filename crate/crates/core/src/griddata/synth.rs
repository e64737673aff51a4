//! Synthetic weather-like fields: isotropic power-law random fields with
//! vertical autocorrelation between adjacent pressure levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::field::GridField;
use super::meta::{Level, MetaEntry, PvsMeta, VariableId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Power spectrum slope: `P(k) ~ k^-beta`.
    pub beta: f64,
    /// AR(1) coefficient between adjacent levels of one variable.
    pub level_rho: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { beta: 3.0, level_rho: 0.9 }
    }
}

/// Zero-mean, unit-variance doubly periodic random field with power spectrum
/// `~ k^-beta`, row-major `h x w`.
pub fn spectral_noise<R: Rng>(h: usize, w: usize, beta: f64, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = Vec::with_capacity(h * w);
    for i in 0..h {
        let ki = i.min(h - i) as f64;
        for j in 0..w {
            let kj = j.min(w - j) as f64;
            let k = (ki * ki + kj * kj).sqrt();
            let amp = if k == 0.0 { 0.0 } else { k.powf(-beta / 2.0) };
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            buf.push(Complex::new(re * amp, im * amp));
        }
    }
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_inverse(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_inverse(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-300);
    for v in &mut out {
        *v = (*v - mean) / sd;
    }
    out
}

/// Rough climatological offset and spread for a channel, so generated fields
/// carry realistic units and the normalization path is exercised.
pub fn climatology(e: &MetaEntry) -> (f64, f64) {
    let p = match e.level {
        Level::Hpa(p) => p as f64,
        Level::Surface => 1000.0,
    };
    let height_km = 7.3 * (1013.25 / p).ln();
    match e.variable {
        VariableId::Z => (9.80665 * 1000.0 * height_km, 400.0 + 60.0 * height_km),
        VariableId::T => ((288.0 - 6.5 * height_km).max(216.0), 8.0),
        VariableId::U => (5.0 + 10.0 * (1.0 - p / 1000.0), 10.0),
        VariableId::V => (0.0, 7.0),
        VariableId::W => (0.0, 0.22),
        VariableId::Q => {
            let m = 0.012 * (p / 1000.0).powi(3);
            (m, 0.4 * m + 1e-6)
        }
        VariableId::U10 | VariableId::V10 => (0.0, 5.0),
        VariableId::U100 | VariableId::V100 => (0.0, 6.5),
        VariableId::T2m => (288.0, 15.0),
        VariableId::Tcc => (0.6, 0.36),
        VariableId::Sp => (96_000.0, 9584.49),
        VariableId::Msl => (101_325.0, 1100.0),
        VariableId::Tp1h
        | VariableId::Tp2h
        | VariableId::Tp3h
        | VariableId::Tp4h
        | VariableId::Tp5h
        | VariableId::Tp6h => (0.0, 1.0),
    }
}

fn precip_hours(v: VariableId) -> Option<f64> {
    match v {
        VariableId::Tp1h => Some(1.0),
        VariableId::Tp2h => Some(2.0),
        VariableId::Tp3h => Some(3.0),
        VariableId::Tp4h => Some(4.0),
        VariableId::Tp5h => Some(5.0),
        VariableId::Tp6h => Some(6.0),
        _ => None,
    }
}

/// Map a unit-variance anomaly into physical units for `e`.
pub fn to_physical(e: &MetaEntry, anomaly: f64) -> f64 {
    if let Some(hours) = precip_hours(e.variable) {
        // skewed, non-negative
        return 0.3 * hours.sqrt() * (anomaly - 1.0).exp();
    }
    let (m, s) = climatology(e);
    m + s * anomaly
}

/// Unit-variance anomalies for every channel of `meta`, channel-major.
/// Channels of one variable are chained across sorted pressure levels by an
/// AR(1) process with coefficient `level_rho`.
pub fn synth_anomalies<R: Rng>(meta: &PvsMeta, h: usize, w: usize, params: SynthParams, rng: &mut R) -> Vec<Vec<f64>> {
    let c = meta.len();
    let mut noise: Vec<Vec<f64>> = (0..c).map(|_| spectral_noise(h, w, params.beta, rng)).collect();
    let rho = params.level_rho.clamp(-1.0, 1.0);
    let innov = (1.0 - rho * rho).sqrt();
    let entries = meta.entries();
    let mut by_var: Vec<(VariableId, Vec<(u16, usize)>)> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if let Level::Hpa(p) = e.level {
            match by_var.iter_mut().find(|(v, _)| *v == e.variable) {
                Some((_, list)) => list.push((p, i)),
                None => by_var.push((e.variable, vec![(p, i)])),
            }
        }
    }
    for (_, mut chain) in by_var {
        chain.sort_unstable();
        for pair in chain.windows(2) {
            let (prev, cur) = (pair[0].1, pair[1].1);
            let mixed: Vec<f64> = noise[prev]
                .iter()
                .zip(&noise[cur])
                .map(|(a, b)| rho * a + innov * b)
                .collect();
            noise[cur] = mixed;
        }
    }
    noise
}

/// Deterministic synthetic field for `meta` on the default `h x w` grid.
pub fn synth_generate(meta: &PvsMeta, h: usize, w: usize, seed: u64, params: SynthParams) -> Result<GridField> {
    if h < 8 || w < 8 {
        return Err(Error::config(format!("synthetic grid {h}x{w} smaller than 8x8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anomalies = synth_anomalies(meta, h, w, params, &mut rng);
    let mut values = Vec::with_capacity(meta.len() * h * w);
    for (e, plane) in meta.entries().iter().zip(&anomalies) {
        values.extend(plane.iter().map(|&a| to_physical(e, a) as f32));
    }
    GridField::on_default_grid(meta.clone(), h, w, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::griddata::meta::LEVELS_25;

    fn pearson(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn deterministic_per_seed() {
        let meta = PvsMeta::parse_list("t500,t850,q700").unwrap();
        let a = synth_generate(&meta, 16, 16, 11, SynthParams::default()).unwrap();
        let b = synth_generate(&meta, 16, 16, 11, SynthParams::default()).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&meta, 16, 16, 12, SynthParams::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn adjacent_levels_are_more_correlated() {
        let meta = PvsMeta::upper_air(VariableId::T, &LEVELS_25).unwrap();
        let f = synth_generate(&meta, 64, 64, 5, SynthParams { beta: 3.0, level_rho: 0.9 }).unwrap();
        for i in 0..20 {
            let near = pearson(f.channel(i), f.channel(i + 1));
            let far = pearson(f.channel(i), f.channel(i + 5));
            assert!(near > far, "level {i}: {near} vs {far}");
        }
    }

    #[test]
    fn independent_levels_when_rho_zero() {
        let meta = PvsMeta::upper_air(VariableId::T, &[500, 850]).unwrap();
        let f = synth_generate(&meta, 64, 64, 8, SynthParams { beta: 3.0, level_rho: 0.0 }).unwrap();
        let r = pearson(f.channel(0), f.channel(1));
        assert!(r.abs() < 0.1, "{r}");
    }

    #[test]
    fn finite_positive_variance_over_beta_range() {
        let meta = PvsMeta::parse_list("z500").unwrap();
        for beta in [2.0, 2.5, 3.0, 3.5, 4.0] {
            let f = synth_generate(&meta, 32, 32, 1, SynthParams { beta, level_rho: 0.9 }).unwrap();
            let v = f.values();
            let m = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(var.is_finite() && var > 0.0);
        }
    }

    #[test]
    fn too_small_grid() {
        let meta = PvsMeta::parse_list("t850").unwrap();
        assert!(synth_generate(&meta, 4, 16, 0, SynthParams::default()).is_err());
    }
}
