//! `.wlat` container and the compress/decompress pipelines.
//!
//! ```text
//! magic        4 bytes "WLAT"
//! version      u16
//! C            u32
//! meta         C x (variable code u16, level u16; 0xFFFF = surface)
//! H, W         u32 each
//! patch        ph, pw, sh, sw, qh, qw as u32
//! nb           u32
//! H', W'       u32 each
//! norm         mean f64 x C, std f64 x C
//! fingerprint  32 bytes (SHA-256 of the model)
//! payload_len  u64
//! payload      packed tokens (see `bqm`)
//! ```
//! All integers little-endian.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::bqm::LatentBits;
use crate::error::{Error, Result};
use crate::griddata::{GridField, LatWeights, Level, MetaEntry, NormStats, PvsMeta, VariableId};
use crate::metrics::weighted_rmse;
use crate::model::Wla;
use crate::vaeformer::PatchConfig;

pub const MAGIC: &[u8; 4] = b"WLAT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WlatHeader {
    pub meta: PvsMeta,
    pub height: usize,
    pub width: usize,
    pub patch: PatchConfig,
    pub nb: usize,
    pub grid: (usize, usize),
    pub norm: NormStats,
    pub fingerprint: [u8; 32],
}

impl WlatHeader {
    pub fn encoded_len(&self) -> usize {
        let c = self.meta.len();
        4 + 2 + 4 + 4 * c + 8 + 24 + 4 + 8 + 16 * c + 32 + 8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WlatFile {
    pub header: WlatHeader,
    pub bits: LatentBits,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Range(format!("{what} {v} does not fit in u32")))
}

impl WlatFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let mut out = Vec::with_capacity(h.encoded_len() + self.bits.payload.len());
        out.write_all(MAGIC)?;
        out.write_u16::<LE>(VERSION)?;
        out.write_u32::<LE>(u32_of(h.meta.len(), "channel count")?)?;
        for e in h.meta.entries() {
            out.write_u16::<LE>(e.variable.code())?;
            out.write_u16::<LE>(e.level.code())?;
        }
        out.write_u32::<LE>(u32_of(h.height, "height")?)?;
        out.write_u32::<LE>(u32_of(h.width, "width")?)?;
        let p = h.patch;
        for v in [p.patch.0, p.patch.1, p.stride.0, p.stride.1, p.pad.0, p.pad.1] {
            out.write_u32::<LE>(u32_of(v, "patch geometry")?)?;
        }
        out.write_u32::<LE>(u32_of(h.nb, "bits per token")?)?;
        out.write_u32::<LE>(u32_of(h.grid.0, "token rows")?)?;
        out.write_u32::<LE>(u32_of(h.grid.1, "token columns")?)?;
        for &m in &h.norm.mean {
            out.write_f64::<LE>(m)?;
        }
        for &s in &h.norm.std {
            out.write_f64::<LE>(s)?;
        }
        out.write_all(&h.fingerprint)?;
        out.write_u64::<LE>(self.bits.payload.len() as u64)?;
        out.write_all(&self.bits.payload)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let total = bytes.len() as u64;
        let short = |e: std::io::Error, need: u64| -> Error {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Truncated { expected: need, actual: total }
            } else {
                Error::Io(e)
            }
        };
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|e| short(e, 6))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad wlat magic {magic:?}")));
        }
        let version = cur.read_u16::<LE>().map_err(|e| short(e, 6))?;
        if version != VERSION {
            return Err(Error::Format(format!("wlat version {version}, expected {VERSION}")));
        }
        let c = cur.read_u32::<LE>().map_err(|e| short(e, 10))? as usize;
        let fixed = 4 + 2 + 4 + 4 * c as u64 + 8 + 24 + 4 + 8 + 16 * c as u64 + 32 + 8;
        if total < fixed {
            return Err(Error::Truncated { expected: fixed, actual: total });
        }
        let mut entries = Vec::with_capacity(c);
        for _ in 0..c {
            let v = VariableId::from_code(cur.read_u16::<LE>()?)?;
            entries.push(MetaEntry::new(v, Level::from_code(cur.read_u16::<LE>()?)));
        }
        let meta = PvsMeta::new(entries)?;
        let height = cur.read_u32::<LE>()? as usize;
        let width = cur.read_u32::<LE>()? as usize;
        let mut g = [0usize; 6];
        for v in &mut g {
            *v = cur.read_u32::<LE>()? as usize;
        }
        let patch = PatchConfig { patch: (g[0], g[1]), stride: (g[2], g[3]), pad: (g[4], g[5]) };
        let nb = cur.read_u32::<LE>()? as usize;
        let grid = (cur.read_u32::<LE>()? as usize, cur.read_u32::<LE>()? as usize);
        let mut mean = vec![0.0; c];
        cur.read_f64_into::<LE>(&mut mean)?;
        let mut std = vec![0.0; c];
        cur.read_f64_into::<LE>(&mut std)?;
        let norm = NormStats::new(mean, std)?;
        let mut fingerprint = [0u8; 32];
        cur.read_exact(&mut fingerprint)?;
        let payload_len = cur.read_u64::<LE>()?;

        if patch.token_grid_shape(height, width)? != grid {
            return Err(Error::Format(format!("token grid {grid:?} inconsistent with {height}x{width} and {patch:?}")));
        }
        let expected_payload = LatentBits::payload_len(grid.0, grid.1, nb) as u64;
        if payload_len != expected_payload {
            return Err(Error::Format(format!(
                "payload length {payload_len}, geometry implies {expected_payload}"
            )));
        }
        let pos = cur.position();
        let need = pos + payload_len;
        if total < need {
            return Err(Error::Truncated { expected: need, actual: total });
        }
        if total > need {
            return Err(Error::Format(format!("{} trailing bytes after payload", total - need)));
        }
        let payload = bytes[pos as usize..].to_vec();
        let bits = LatentBits::new(grid.0, grid.1, nb, payload)?;
        Ok(Self {
            header: WlatHeader { meta, height, width, patch, nb, grid, norm, fingerprint },
            bits,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn payload_bits(&self) -> u64 {
        self.bits.payload_bits()
    }
}

/// Normalize, encode and pack `x`.
pub fn compress(x: &GridField, model: &Wla) -> Result<WlatFile> {
    let bits = model.encode(x)?;
    let cfg = &model.config;
    Ok(WlatFile {
        header: WlatHeader {
            meta: cfg.meta.clone(),
            height: cfg.height,
            width: cfg.width,
            patch: cfg.patch,
            nb: cfg.nb,
            grid: model.token_grid(),
            norm: model.norm.clone(),
            fingerprint: model.fingerprint(),
        },
        bits,
    })
}

/// Unpack, decode and denormalize; the model must be the one that wrote `f`.
pub fn decompress(f: &WlatFile, model: &Wla) -> Result<GridField> {
    if f.header.fingerprint != model.fingerprint() {
        return Err(Error::Mismatch("model fingerprint differs from the one recorded in the file".into()));
    }
    let out = model.decode_normalized(&f.bits)?;
    f.header.norm.denormalize(&out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Original bits over payload bits; the header is excluded.
    pub ratio: f64,
    pub bpsp: f64,
    pub payload_bytes: usize,
    pub header_bytes: usize,
    /// Per-channel weighted RMSE of the reconstruction, when one is given.
    pub weighted_rmse: Option<Vec<f64>>,
}

pub fn measure(f: &WlatFile, original: &GridField, reconstructed: Option<&GridField>) -> Result<Measurement> {
    let (c, h, w) = (original.channels(), original.height(), original.width());
    if (c, h, w) != (f.header.meta.len(), f.header.height, f.header.width) {
        return Err(Error::shape("original field does not match the file geometry"));
    }
    let bits = f.payload_bits();
    let raw = (c * h * w) as f64 * 32.0;
    let weighted_rmse = match reconstructed {
        Some(r) => Some(weighted_rmse(r, original, &LatWeights::from_lats(original.lats())?)?),
        None => None,
    };
    Ok(Measurement {
        ratio: raw / bits as f64,
        bpsp: bits as f64 / (c * h * w) as f64,
        payload_bytes: f.bits.payload.len(),
        header_bytes: f.header.encoded_len(),
        weighted_rmse,
    })
}
