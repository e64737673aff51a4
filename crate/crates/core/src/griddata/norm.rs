use serde::{Deserialize, Serialize};

use super::field::GridField;
use crate::error::{Error, Result};

/// Per-channel affine normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::shape("mean and std lengths differ"));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::config(format!("std must be positive and finite, got {s}")));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Pooled per-channel mean and standard deviation over `fields`.
    pub fn fit(fields: &[GridField]) -> Result<Self> {
        let first = fields.first().ok_or_else(|| Error::config("no fields to fit"))?;
        let c = first.channels();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for f in fields {
            if f.meta() != first.meta() {
                return Err(Error::Mismatch("fields with different subsets".into()));
            }
            for (ch, (m, s)) in mean.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in f.channel(ch) {
                    *m += v as f64;
                    *s += (v as f64) * (v as f64);
                }
            }
            count += f.plane_len();
        }
        let n = count as f64;
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| {
                let var = (s / n - (m / n).powi(2)).max(0.0);
                var.sqrt().max(1e-12)
            })
            .collect();
        let mean = mean.iter().map(|m| m / n).collect();
        Self::new(mean, std)
    }

    fn check(&self, x: &GridField) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::shape(format!(
                "{} channels, statistics for {}",
                x.channels(),
                self.channels()
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("non-positive std"));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &GridField) -> Result<GridField> {
        self.check(x)?;
        let n = x.plane_len();
        let values = x
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / n;
                ((v as f64 - self.mean[c]) / self.std[c]) as f32
            })
            .collect();
        x.with_values(x.meta().clone(), values)
    }

    pub fn denormalize(&self, x: &GridField) -> Result<GridField> {
        self.check(x)?;
        let n = x.plane_len();
        let values = x
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / n;
                (v as f64 * self.std[c] + self.mean[c]) as f32
            })
            .collect();
        x.with_values(x.meta().clone(), values)
    }
}

/// Per-row latitude weights with unit mean.
#[derive(Clone, Debug, PartialEq)]
pub struct LatWeights(Vec<f64>);

impl LatWeights {
    /// `w_i = cos(lat_i) / mean_j cos(lat_j)`. Pole rows keep weight zero
    /// and still count in the mean.
    pub fn from_lats(lats: &[f64]) -> Result<Self> {
        if lats.is_empty() {
            return Err(Error::shape("no latitudes"));
        }
        if let Some(l) = lats.iter().find(|l| l.abs() > 90.0) {
            return Err(Error::Range(format!("latitude {l}")));
        }
        let cos: Vec<f64> = lats.iter().map(|l| l.to_radians().cos().max(0.0)).collect();
        let mean = cos.iter().sum::<f64>() / cos.len() as f64;
        if mean <= 0.0 {
            return Err(Error::config("all rows at the poles"));
        }
        Ok(Self(cos.iter().map(|c| c / mean).collect()))
    }

    pub fn uniform(rows: usize) -> Self {
        Self(vec![1.0; rows])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Weight for every pixel of a row-major `H x W` plane.
    pub fn per_pixel(&self, width: usize) -> Vec<f64> {
        self.0.iter().flat_map(|&w| std::iter::repeat_n(w, width)).collect()
    }
}
