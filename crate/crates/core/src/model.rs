//! The weather latent autoencoder: unification, patch transformer, binary
//! tokens and the way back.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bqm::{pack_rows, quantize_rows, LatentBits, QuantMode, ENTROPY_ALPHA};
use crate::error::{Error, Result};
use crate::griddata::{GridField, LatWeights, NormStats, PvsMeta};
use crate::numerics::checkpoint::TensorFile;
use crate::numerics::nn::Linear;
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};
use crate::pvum::{field_rows, rows_to_values, MapRole, MetaHypernet, PvumConfig};
use crate::vaeformer::{PatchConfig, PatchEmbed, PatchExpand, StackConfig, TokenStack};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WlaConfig {
    /// Channel subset the model is trained for.
    pub meta: PvsMeta,
    pub height: usize,
    pub width: usize,
    pub patch: PatchConfig,
    pub stack: StackConfig,
    pub pvum: PvumConfig,
    pub nb: usize,
    pub seed: u64,
}

impl WlaConfig {
    /// 64x64 grid, 8x8 patches at stride 6, depths 4/8, 32-bit tokens.
    pub fn desk(meta: PvsMeta) -> Self {
        Self {
            meta,
            height: 64,
            width: 64,
            patch: PatchConfig::desk(),
            stack: StackConfig::desk(),
            pvum: PvumConfig::desk(),
            nb: 32,
            seed: 0,
        }
    }

    /// [`WlaConfig::desk`] with a narrower token width, sized for tests on a
    /// single CPU core.
    pub fn toy(meta: PvsMeta) -> Self {
        let mut c = Self::desk(meta);
        c.stack.d_model = 64;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.stack.validate()?;
        self.pvum.validate()?;
        crate::bqm::CodebookSpec::new(self.nb)?;
        self.patch.check_coverage(self.height, self.width)
    }

    pub fn token_grid(&self) -> Result<(usize, usize)> {
        self.patch.token_grid_shape(self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Arch {
    pvum_in: MetaHypernet,
    embed: PatchEmbed,
    encoder: TokenStack,
    to_bits: Linear,
    from_bits: Linear,
    decoder: TokenStack,
    expand: PatchExpand,
    pvum_out: MetaHypernet,
}

impl Arch {
    fn build(cfg: &WlaConfig, ps: &mut ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.stack.d_model;
        let c2 = cfg.pvum.c2;
        Ok(Self {
            pvum_in: MetaHypernet::new(ps, &mut rng, "pvum_in", cfg.pvum, MapRole::Forward)?,
            embed: PatchEmbed::new(ps, &mut rng, "embed", cfg.patch, c2, d)?,
            encoder: TokenStack::new(ps, &mut rng, "encoder", cfg.stack.encoder_depth, &cfg.stack)?,
            to_bits: Linear::new(ps, &mut rng, "to_bits", d, cfg.nb, 1.0 / (d as f64).sqrt()),
            from_bits: Linear::new(ps, &mut rng, "from_bits", cfg.nb, d, 1.0),
            decoder: TokenStack::new(ps, &mut rng, "decoder", cfg.stack.decoder_depth, &cfg.stack)?,
            expand: PatchExpand::new(ps, &mut rng, "expand", cfg.patch, c2, d)?,
            pvum_out: MetaHypernet::new(ps, &mut rng, "pvum_out", cfg.pvum, MapRole::Inverse)?,
        })
    }
}

/// Loss nodes of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub recon: Var,
    pub entropy: Var,
}

/// A configured model with its parameters and the normalization it was
/// trained with.
#[derive(Clone, Debug)]
pub struct Wla {
    pub config: WlaConfig,
    pub params: ParamStore<f32>,
    pub norm: NormStats,
    arch: Arch,
}

impl Wla {
    pub fn new(config: WlaConfig, norm: NormStats) -> Result<Self> {
        if norm.channels() != config.meta.len() {
            return Err(Error::shape(format!(
                "normalization for {} channels, model subset has {}",
                norm.channels(),
                config.meta.len()
            )));
        }
        let mut params = ParamStore::new();
        let arch = Arch::build(&config, &mut params)?;
        Ok(Self { config, params, norm, arch })
    }

    pub fn token_grid(&self) -> (usize, usize) {
        self.config.token_grid().expect("validated")
    }

    pub fn lat_weights(&self) -> LatWeights {
        LatWeights::from_lats(&crate::griddata::default_lats(self.config.height)).expect("valid grid")
    }

    /// Pixel-row weights (one per `(H*W)` row) in `T`.
    pub fn pixel_weights<T: Real>(&self) -> Vec<T> {
        self.lat_weights().per_pixel(self.config.width).into_iter().map(T::lit).collect()
    }

    fn check_meta(&self, meta: &PvsMeta) -> Result<()> {
        if *meta != self.config.meta {
            return Err(Error::Mismatch(format!("field subset {meta} but model trained for {}", self.config.meta)));
        }
        Ok(())
    }

    fn check_grid(&self, x: &GridField) -> Result<()> {
        if (x.height(), x.width()) != (self.config.height, self.config.width) {
            return Err(Error::shape(format!(
                "field grid {}x{}, model grid {}x{}",
                x.height(),
                x.width(),
                self.config.height,
                self.config.width
            )));
        }
        Ok(())
    }

    /// Pre-quantization token vectors, `tokens x nb`, from `(H*W) x C1`
    /// normalized rows.
    pub fn encode_graph<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (h, w) = (self.config.height, self.config.width);
        let y = self.arch.pvum_in.apply(g, ps, &self.config.meta, x)?;
        let t = self.arch.embed.forward(g, ps, y, h, w)?;
        let t = self.arch.encoder.forward(g, ps, t, self.token_grid())?;
        self.arch.to_bits.forward(g, ps, t)
    }

    /// Normalized `(H*W) x C1` rows from dequantized tokens.
    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, q: Var) -> Result<Var> {
        let (h, w) = (self.config.height, self.config.width);
        let t = self.arch.from_bits.forward(g, ps, q)?;
        let t = self.arch.decoder.forward(g, ps, t, self.token_grid())?;
        let y = self.arch.expand.forward(g, ps, t, h, w)?;
        self.arch.pvum_out.apply(g, ps, &self.config.meta, y)
    }

    /// Reconstruction and entropy terms for one normalized sample given as
    /// `(H*W) x C1` rows.
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        lambda_entropy: f64,
        mode: QuantMode,
    ) -> Result<LossNodes> {
        let xv = g.constant(x.clone());
        let u = self.encode_graph(g, ps, xv)?;
        let (v, q) = quantize_rows(g, u, mode);
        let out = self.decode_graph(g, ps, q)?;
        let weights = self.pixel_weights::<T>();
        let recon = g.weighted_mse(out, x, &weights)?;
        let entropy = g.entropy_reg(v, ENTROPY_ALPHA)?;
        let total = if lambda_entropy == 0.0 {
            recon
        } else {
            let e = g.scale(entropy, T::lit(lambda_entropy));
            g.add(recon, e)?
        };
        Ok(LossNodes { total, recon, entropy })
    }

    /// Tokens of a normalized field.
    pub fn encode_normalized(&self, x: &GridField) -> Result<LatentBits> {
        self.check_meta(x.meta())?;
        self.check_grid(x)?;
        let mut g = Graph::<f32>::new();
        let xv = g.constant(field_rows(x));
        let u = self.encode_graph(&mut g, &self.params, xv)?;
        let (_, q) = quantize_rows(&mut g, u, QuantMode::Sign);
        let (h, w) = self.token_grid();
        pack_rows(h, w, g.value(q))
    }

    /// Normalized field from tokens.
    pub fn decode_normalized(&self, bits: &LatentBits) -> Result<GridField> {
        let (h, w) = self.token_grid();
        if (bits.h, bits.w, bits.nb) != (h, w, self.config.nb) {
            return Err(Error::shape(format!(
                "tokens {}x{}x{} for a model with {h}x{w}x{}",
                bits.h, bits.w, bits.nb, self.config.nb
            )));
        }
        let mut g = Graph::<f32>::new();
        let q = g.constant(bits.dequantized());
        let out = self.decode_graph(&mut g, &self.params, q)?;
        GridField::on_default_grid(
            self.config.meta.clone(),
            self.config.height,
            self.config.width,
            rows_to_values(g.value(out)),
        )
    }

    /// Tokens of a field in physical units.
    pub fn encode(&self, x: &GridField) -> Result<LatentBits> {
        self.check_meta(x.meta())?;
        if !x.values().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("input field".into()));
        }
        self.encode_normalized(&self.norm.normalize(x)?)
    }

    /// Field in physical units from tokens.
    pub fn decode(&self, bits: &LatentBits) -> Result<GridField> {
        self.norm.denormalize(&self.decode_normalized(bits)?)
    }

    /// `decode(encode(x))`.
    pub fn round_trip(&self, x: &GridField) -> Result<GridField> {
        self.decode(&self.encode(x)?)
    }

    /// SHA-256 over the configuration, normalization and every parameter.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("serializable"));
        h.update(serde_json::to_vec(&self.norm).expect("serializable"));
        for (name, t) in self.params.names().iter().zip(self.params.values()) {
            h.update(name.as_bytes());
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Parameters (and optimizer moments when `with_state`) as a tensor file.
    pub fn to_tensor_file(&self, extra: serde_json::Value, with_state: bool) -> TensorFile {
        let meta = serde_json::json!({
            "config": self.config,
            "norm": self.norm,
            "step": self.params.step(),
            "extra": extra,
        });
        let mut tensors = Vec::new();
        for id in self.params.ids() {
            let name = &self.params.names()[id.index()];
            tensors.push((name.clone(), self.params.value(id).clone()));
            if with_state {
                let (m, v) = self.params.moments(id);
                tensors.push((format!("{name}#m"), m.clone()));
                tensors.push((format!("{name}#v"), v.clone()));
            }
        }
        TensorFile { meta, tensors }
    }

    /// Rebuilds a model from [`Wla::to_tensor_file`] output; optimizer moments
    /// and step are restored when present.
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let config: WlaConfig = serde_json::from_value(
            file.meta.get("config").cloned().ok_or_else(|| Error::Missing("checkpoint config".into()))?,
        )?;
        let norm: NormStats = serde_json::from_value(
            file.meta.get("norm").cloned().ok_or_else(|| Error::Missing("checkpoint normalization".into()))?,
        )?;
        let step = file.meta.get("step").and_then(|s| s.as_u64()).unwrap_or(0);
        let mut model = Self::new(config, norm)?;
        load_params(&mut model.params, file)?;
        model.params.set_step(step);
        Ok(model)
    }
}

/// Copies named tensors (and `#m`/`#v` moments when present) into `ps`.
pub fn load_params(ps: &mut ParamStore<f32>, file: &TensorFile) -> Result<()> {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let name = ps.names()[id.index()].clone();
        let t = file.get(&name).ok_or_else(|| Error::Missing(format!("parameter {name} in checkpoint")))?;
        if t.shape() != ps.value(id).shape() {
            return Err(Error::shape(format!(
                "parameter {name}: checkpoint {:?}, model {:?}",
                t.shape(),
                ps.value(id).shape()
            )));
        }
        *ps.value_mut(id) = t.clone();
        if let (Some(m), Some(v)) = (file.get(&format!("{name}#m")), file.get(&format!("{name}#v"))) {
            ps.set_state(id, m.clone(), v.clone())?;
        }
    }
    Ok(())
}
