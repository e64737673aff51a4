//! Verification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::griddata::{GridField, LatWeights};

/// Quantile thresholds used for extreme-event scores.
pub const SEDI_QUANTILES: [f64; 4] = [0.90, 0.95, 0.98, 0.99];
pub const SEDI_EPS: f64 = 1e-6;

fn same_shape(a: &GridField, b: &GridField) -> Result<()> {
    if a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Per-channel `sqrt(mean_pixels(w_row (pred - truth)^2))`.
pub fn weighted_rmse(pred: &GridField, truth: &GridField, weights: &LatWeights) -> Result<Vec<f64>> {
    same_shape(pred, truth)?;
    if weights.len() != truth.height() {
        return Err(Error::shape(format!("{} weights for {} rows", weights.len(), truth.height())));
    }
    let w = truth.width();
    let n = truth.plane_len() as f64;
    Ok((0..truth.channels())
        .map(|c| {
            let (p, t) = (pred.channel(c), truth.channel(c));
            let mut acc = 0.0;
            for (i, wi) in weights.as_slice().iter().enumerate() {
                for j in i * w..(i + 1) * w {
                    let d = p[j] as f64 - t[j] as f64;
                    acc += wi * d * d;
                }
            }
            (acc / n).sqrt()
        })
        .collect())
}

/// Root of the per-channel weighted MSE averaged over several field pairs.
pub fn weighted_rmse_pooled(pairs: &[(GridField, GridField)], weights: &LatWeights) -> Result<Vec<f64>> {
    let first = pairs.first().ok_or_else(|| Error::config("no field pairs"))?;
    let mut acc = vec![0.0; first.1.channels()];
    for (p, t) in pairs {
        let r = weighted_rmse(p, t, weights)?;
        if r.len() != acc.len() {
            return Err(Error::shape("channel count changes across pairs"));
        }
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v * v;
        }
    }
    Ok(acc.into_iter().map(|a| (a / pairs.len() as f64).sqrt()).collect())
}

/// Per-channel spatial standard deviation (the climatological reference).
pub fn channel_std(x: &GridField) -> Vec<f64> {
    (0..x.channels())
        .map(|c| {
            let v = x.channel(c);
            let n = v.len() as f64;
            let m = v.iter().map(|&a| a as f64).sum::<f64>() / n;
            (v.iter().map(|&a| (a as f64 - m).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// `|pred - truth|` per pixel.
pub fn mae_map(pred: &GridField, truth: &GridField) -> Result<GridField> {
    same_shape(pred, truth)?;
    let values = pred.values().iter().zip(truth.values()).map(|(p, t)| (p - t).abs()).collect();
    truth.with_values(truth.meta().clone(), values)
}

/// Stored bits per scalar value.
pub fn bpsp(payload_bits: u64, c: usize, h: usize, w: usize) -> f64 {
    payload_bits as f64 / (c * h * w) as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl Contingency {
    pub fn add(&mut self, forecast: bool, observed: bool) {
        match (forecast, observed) {
            (true, true) => self.hits += 1,
            (false, true) => self.misses += 1,
            (true, false) => self.false_alarms += 1,
            (false, false) => self.correct_negatives += 1,
        }
    }

    pub fn hit_rate(&self) -> Option<f64> {
        let events = self.hits + self.misses;
        (events > 0).then(|| self.hits as f64 / events as f64)
    }

    pub fn false_alarm_rate(&self) -> Option<f64> {
        let non = self.false_alarms + self.correct_negatives;
        (non > 0).then(|| self.false_alarms as f64 / non as f64)
    }
}

/// Symmetric extremal dependence index of hit rate `h` and false-alarm rate
/// `f`, both clamped to `[eps, 1 - eps]`.
pub fn sedi_score(h: f64, f: f64, eps: f64) -> f64 {
    let h = h.clamp(eps, 1.0 - eps);
    let f = f.clamp(eps, 1.0 - eps);
    let (lf, lh, lf1, lh1) = (f.ln(), h.ln(), (1.0 - f).ln(), (1.0 - h).ln());
    (lf - lh - lf1 + lh1) / (lf + lh + lf1 + lh1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SediScore {
    pub quantile: f64,
    pub threshold: f64,
    pub counts: Contingency,
    /// Raw hit rate, unclamped.
    pub hit_rate: Option<f64>,
    pub false_alarm_rate: Option<f64>,
    /// `None` when the truth has no events (or no non-events) above the
    /// threshold.
    pub sedi: Option<f64>,
}

/// Scores per channel, per quantile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SediReport {
    pub channels: Vec<Vec<SediScore>>,
}

impl SediReport {
    pub fn score(&self, channel: usize, quantile: f64) -> Option<&SediScore> {
        self.channels.get(channel)?.iter().find(|s| (s.quantile - quantile).abs() < 1e-12)
    }
}

/// Linear-interpolated empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// SEDI over several forecast/truth pairs pooled per channel. Thresholds are
/// per-channel quantiles of the pooled truth.
pub fn sedi_pooled(pairs: &[(GridField, GridField)], quantiles: &[f64], eps: f64) -> Result<SediReport> {
    let first = pairs.first().ok_or_else(|| Error::config("no field pairs"))?;
    if let Some(q) = quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
        return Err(Error::Range(format!("quantile {q} outside (0, 1)")));
    }
    for (p, t) in pairs {
        same_shape(p, t)?;
        same_shape(t, &first.1)?;
    }
    let channels = first.1.channels();
    let mut out = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut truth: Vec<f64> = pairs.iter().flat_map(|(_, t)| t.channel(c).iter().map(|&v| v as f64)).collect();
        truth.sort_by(|a, b| a.total_cmp(b));
        let mut scores = Vec::with_capacity(quantiles.len());
        for &q in quantiles {
            let threshold = quantile_sorted(&truth, q);
            let mut counts = Contingency::default();
            for (p, t) in pairs {
                for (&pv, &tv) in p.channel(c).iter().zip(t.channel(c)) {
                    counts.add(pv as f64 > threshold, tv as f64 > threshold);
                }
            }
            let hit_rate = counts.hit_rate();
            let false_alarm_rate = counts.false_alarm_rate();
            let sedi = match (hit_rate, false_alarm_rate) {
                (Some(h), Some(f)) => Some(sedi_score(h, f, eps)),
                _ => None,
            };
            scores.push(SediScore { quantile: q, threshold, counts, hit_rate, false_alarm_rate, sedi });
        }
        out.push(scores);
    }
    Ok(SediReport { channels: out })
}

pub fn sedi(pred: &GridField, truth: &GridField, quantiles: &[f64], eps: f64) -> Result<SediReport> {
    sedi_pooled(&[(pred.clone(), truth.clone())], quantiles, eps)
}
