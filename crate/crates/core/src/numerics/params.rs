use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters plus the adaptive-moment state that trains them.
#[derive(Clone, Debug)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    decay: Vec<bool>,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            decay: Vec::new(),
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    /// Register a parameter. `decay` marks it for decoupled weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.first.push(Tensor::zeros(value.shape()));
        self.second.push(Tensor::zeros(value.shape()));
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor<T>, &Tensor<T>) {
        (&self.first[id.0], &self.second[id.0])
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Restore optimizer state (checkpoint reload).
    pub fn set_state(&mut self, id: ParamId, first: Tensor<T>, second: Tensor<T>) -> Result<()> {
        self.values[id.0].same_shape(&first)?;
        self.values[id.0].same_shape(&second)?;
        self.first[id.0] = first;
        self.second[id.0] = second;
        Ok(())
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Copy in another precision (optimizer state included).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            decay: self.decay.clone(),
            first: self.first.iter().map(Tensor::cast).collect(),
            second: self.second.iter().map(Tensor::cast).collect(),
            step: self.step,
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamW {
    /// One update of every parameter. A non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            store.values[i].same_shape(g)?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.names[i])));
            }
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let wd = if store.decay[i] { weight_decay } else { 0.0 };
            let p = store.values[i].data_mut();
            let m = store.first[i].data_mut();
            let v = store.second[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j].f64();
                let mj = self.beta1 * m[j].f64() + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j].f64() + (1.0 - self.beta2) * gj * gj;
                m[j] = T::lit(mj);
                v[j] = T::lit(vj);
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let pj = p[j].f64();
                p[j] = T::lit(pj - lr * (mhat / (vhat.sqrt() + self.eps) + wd * pj));
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm_f64).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Linear warm-up followed by cosine decay back to the floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_floor: f64,
    pub lr_peak: f64,
}

impl Schedule {
    pub const ERA5_FLOOR: f64 = 3.2e-6;
    pub const ERA5_PEAK: f64 = 3.2e-5;

    pub fn new(warmup_steps: u64, total_steps: u64) -> Result<Self> {
        Self { warmup_steps, total_steps, lr_floor: Self::ERA5_FLOOR, lr_peak: Self::ERA5_PEAK }
            .validated()
    }

    pub fn with_rates(mut self, floor: f64, peak: f64) -> Result<Self> {
        self.lr_floor = floor;
        self.lr_peak = peak;
        self.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(0 < self.warmup_steps && self.warmup_steps < self.total_steps) {
            return Err(Error::config(format!(
                "schedule needs 0 < warmup ({}) < total ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lr_floor <= self.lr_peak) || self.lr_floor < 0.0 {
            return Err(Error::config("schedule needs 0 <= lr_floor <= lr_peak"));
        }
        Ok(self)
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Range(format!("step {step} beyond {}", self.total_steps)));
        }
        let span = self.lr_peak - self.lr_floor;
        if step <= self.warmup_steps {
            return Ok(self.lr_floor + span * step as f64 / self.warmup_steps as f64);
        }
        let frac = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.lr_floor + span * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

/// Gaussian initializer.
pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std >= 0");
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("shape")
}
