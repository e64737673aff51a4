//! Training of the autoencoder: latitude-weighted reconstruction plus the
//! entropy surrogate, AdamW with warm-up/cosine schedule and global-norm
//! clipping, periodic checkpoints, exact resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bqm::QuantMode;
use crate::codec::{compress, decompress};
use crate::error::{Error, Result};
use crate::griddata::{GridField, LatWeights, PvsMeta};
use crate::metrics::weighted_rmse_pooled;
use crate::model::Wla;
use crate::numerics::checkpoint::TensorFile;
use crate::numerics::{clip_global_norm, AdamW, Graph, Schedule, Tensor};
use crate::pvum::field_rows;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub warmup: u64,
    pub lr_floor: f64,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub lambda_entropy: f64,
    /// Global gradient-norm bound.
    pub clip: f64,
    pub seed: u64,
    /// Checkpoint interval in steps; zero writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// 500K steps at batch 8, 3.2e-6 -> 3.2e-5 warm-up then cosine decay.
    pub fn era5() -> Self {
        Self {
            steps: 500_000,
            batch: 8,
            warmup: 5_000,
            lr_floor: Schedule::ERA5_FLOOR,
            lr_peak: Schedule::ERA5_PEAK,
            weight_decay: 0.05,
            lambda_entropy: 1e-3,
            clip: 1.0,
            seed: 0,
            checkpoint_every: 10_000,
        }
    }

    /// Short runs need a larger step size than the ERA5-scale schedule.
    pub fn desk() -> Self {
        Self {
            steps: 2_000,
            batch: 8,
            warmup: 100,
            lr_floor: 5e-5,
            lr_peak: 1e-3,
            weight_decay: 0.01,
            lambda_entropy: 1e-3,
            clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule { warmup_steps: self.warmup, total_steps: self.steps, lr_floor: self.lr_floor, lr_peak: self.lr_peak }
            .validated()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.steps <= self.warmup {
            return Err(Error::config(format!("steps {} must exceed warm-up {}", self.steps, self.warmup)));
        }
        self.schedule().map(|_| ())
    }
}

/// Loss of one step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub recon: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Scalar loss terms of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub entropy: f64,
}

/// Loss of a normalized field under `model` (straight-through quantization).
pub fn wla_loss(x: &GridField, model: &Wla, lambda_entropy: f64) -> Result<LossBreakdown> {
    let mut g = Graph::<f32>::new();
    let nodes = model.loss_graph(&mut g, &model.params, &field_rows(x), lambda_entropy, QuantMode::Sign)?;
    let v = |n| g.value(n).data()[0] as f64;
    let out = LossBreakdown { total: v(nodes.total), recon: v(nodes.recon), entropy: v(nodes.entropy) };
    if !out.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(out)
}

/// Model plus training configuration, persisted as a tensor file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Wla,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.model.params.step()
    }

    pub fn to_file(&self) -> TensorFile {
        let extra = serde_json::json!({ "train": self.train });
        self.model.to_tensor_file(extra, true)
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        let model = Wla::from_tensor_file(file)?;
        let train = match file.meta.pointer("/extra/train") {
            Some(v) if !v.is_null() => Some(serde_json::from_value(v.clone())?),
            _ => None,
        };
        Ok(Self { model, train })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(&TensorFile::load(path)?)
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// CSV loss log (`step,lr,recon,entropy,total`), appended per step.
    pub loss_log: Option<PathBuf>,
    /// Directory for `ckpt_<step>.wckp` and `last_good.wckp`.
    pub checkpoint_dir: Option<PathBuf>,
}

pub(crate) fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Trains `model` on normalized fields (see [`crate::griddata::NormStats::normalize`]), continuing from the
/// model's optimizer step (zero for a fresh model). Batch elements run in
/// parallel; their gradients are reduced in a fixed order, so results do not
/// depend on the thread count.
pub fn train(mut model: Wla, cfg: &TrainConfig, data: &[GridField], out: &RunOutputs) -> Result<(Checkpoint, Vec<LossRecord>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let meta: &PvsMeta = &model.config.meta;
    for f in data {
        if f.meta() != meta {
            return Err(Error::Mismatch(format!("training field subset {} differs from model {meta}", f.meta())));
        }
    }
    let rows: Vec<Tensor<f32>> = data.iter().map(field_rows).collect();
    let schedule = cfg.schedule()?;
    let opt = AdamW::default();

    if let Some(dir) = &out.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log_file = match &out.loss_log {
        Some(p) => {
            let fresh = model.params.step() == 0 || !p.exists();
            let mut f = fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(p)?;
            if fresh {
                writeln!(f, "step,lr,recon,entropy,total")?;
            }
            Some(f)
        }
        None => None,
    };

    let mut records = Vec::new();
    let start = model.params.step();
    for step in start..cfg.steps {
        let lr = schedule.lr_at(step)?;
        let idx = batch_indices(cfg.seed, step, rows.len(), cfg.batch);
        let per_sample: Vec<Result<(Vec<Tensor<f32>>, [f64; 3])>> = idx
            .par_iter()
            .map(|&i| {
                let mut g = Graph::<f32>::new();
                let n = model.loss_graph(&mut g, &model.params, &rows[i], cfg.lambda_entropy, QuantMode::Sign)?;
                let vals = [n.total, n.recon, n.entropy].map(|v| g.value(v).data()[0] as f64);
                let grads = g.backward(n.total)?.for_params(&model.params);
                Ok((grads, vals))
            })
            .collect();

        let mut grads: Option<Vec<Tensor<f32>>> = None;
        let mut sums = [0.0f64; 3];
        for r in per_sample {
            let (gs, vals) = r?;
            for k in 0..3 {
                sums[k] += vals[k];
            }
            match &mut grads {
                None => grads = Some(gs),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&gs) {
                        a.add_assign(g);
                    }
                }
            }
        }
        let b = cfg.batch as f64;
        let rec = LossRecord { step, lr, total: sums[0] / b, recon: sums[1] / b, entropy: sums[2] / b };
        let mut grads = grads.expect("batch is non-empty");
        let inv = 1.0 / cfg.batch as f32;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        let finite = rec.total.is_finite() && grads.iter().all(Tensor::is_finite);
        if !finite {
            if let Some(dir) = &out.checkpoint_dir {
                Checkpoint { model: model.clone(), train: Some(cfg.clone()) }.save(dir.join("last_good.wckp"))?;
            }
            return Err(Error::Diverged { step, reason: format!("loss {}", rec.total) });
        }
        clip_global_norm(&mut grads, cfg.clip);
        opt.step(&mut model.params, &grads, lr, cfg.weight_decay)?;
        if let Some(f) = &mut log_file {
            writeln!(f, "{},{:e},{:.8},{:.8},{:.8}", rec.step, rec.lr, rec.recon, rec.entropy, rec.total)?;
        }
        log::debug!("step {step} lr {lr:.3e} recon {:.5} entropy {:.5}", rec.recon, rec.entropy);
        records.push(rec);
        if let Some(dir) = &out.checkpoint_dir {
            let done = step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                Checkpoint { model: model.clone(), train: Some(cfg.clone()) }.save(dir.join(format!("ckpt_{done:07}.wckp")))?;
            }
        }
    }
    let ckpt = Checkpoint { model, train: Some(cfg.clone()) };
    if let Some(dir) = &out.checkpoint_dir {
        ckpt.save(dir.join("final.wckp"))?;
    }
    Ok((ckpt, records))
}

/// Mean of the first and last `window` records' reconstruction loss.
pub fn smoothed_recon(records: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if records.len() < window || window == 0 {
        return None;
    }
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.recon).sum::<f64>() / r.len() as f64;
    Some((mean(&records[..window]), mean(&records[records.len() - window..])))
}

/// Per-channel results against the climatological reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub channels: Vec<String>,
    /// Weighted RMSE of the round trip, original units.
    pub rmse: Vec<f64>,
    /// Weighted RMSE of predicting the pooled per-channel mean.
    pub std_ref: Vec<f64>,
    pub ratio: f64,
    pub bpsp: f64,
}

impl EvalTable {
    pub fn beats_reference(&self) -> bool {
        self.rmse.iter().zip(&self.std_ref).all(|(r, s)| r < s)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row");
        for c in &self.channels {
            s.push(',');
            s.push_str(c);
        }
        s.push_str(",ratio,bpsp\n");
        let mut row = |name: &str, v: &[f64]| {
            s.push_str(name);
            for x in v {
                s.push_str(&format!(",{x:.6}"));
            }
            s.push_str(&format!(",{:.4},{:.6}\n", self.ratio, self.bpsp));
        };
        row("weighted_rmse", &self.rmse);
        row("var_std_ref", &self.std_ref);
        s
    }
}

/// Round-trips every test field (physical units) through the codec.
pub fn evaluate(model: &Wla, test: &[GridField]) -> Result<EvalTable> {
    let first = test.first().ok_or_else(|| Error::config("no test fields"))?;
    let weights = LatWeights::from_lats(first.lats())?;
    let c = first.channels();
    let mut pairs = Vec::with_capacity(test.len());
    let mut bits = 0u64;
    for x in test {
        let f = compress(x, model)?;
        bits = f.payload_bits();
        pairs.push((decompress(&f, model)?, x.clone()));
    }
    let rmse = weighted_rmse_pooled(&pairs, &weights)?;

    let mut mean = vec![0.0; c];
    for x in test {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += x.channel(ch).iter().map(|&v| v as f64).sum::<f64>() / x.plane_len() as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= test.len() as f64);
    let clim: Vec<(GridField, GridField)> = test
        .iter()
        .map(|x| {
            let values = (0..c).flat_map(|ch| std::iter::repeat_n(mean[ch] as f32, x.plane_len())).collect();
            Ok((x.with_values(x.meta().clone(), values)?, x.clone()))
        })
        .collect::<Result<_>>()?;
    let std_ref = weighted_rmse_pooled(&clim, &weights)?;

    let raw = (c * first.plane_len()) as f64 * 32.0;
    Ok(EvalTable {
        channels: first.meta().entries().iter().map(|e| e.to_string()).collect(),
        rmse,
        std_ref,
        ratio: raw / bits as f64,
        bpsp: bits as f64 / (c * first.plane_len()) as f64,
    })
}
