//! Latent dataset construction: one `.wlat` shard per family and timestep, a
//! JSON manifest, an xz-compressed pixel sidecar and storage accounting.
//!
//! Manifest schema (`manifest.json`):
//!
//! ```text
//! version    1
//! families   [{name, subset, fingerprint, height, width, nb, ratio_exact}]
//! splits     {train: {start, end}, val: {...}, test: {...}}   half-open step ranges
//! shards     [{family, time, split, file, offset, payload_bytes, file_bytes, pixel_bytes}]
//! totals     {pixel_bytes, latent_bytes, container_bytes, sidecar_bytes}
//! ```
//!
//! `offset` is the byte offset of the payload inside `file`; `latent_bytes`
//! counts payloads only, `container_bytes` whole files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bqm::compression_ratio;
use crate::codec::{compress, WlatFile};
use crate::error::{Error, Result};
use crate::griddata::{select_subset, wgrid, Archive, GridField, PvsMeta};
use crate::model::Wla;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Bytes per terabyte in the accounting render.
pub const TB: f64 = 1e12;

/// A named pressure-variable subset compressed by one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub name: String,
    pub meta: PvsMeta,
}

impl Family {
    pub fn new(name: impl Into<String>, meta: PvsMeta) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(Error::config(format!("family name {name:?} is not a safe directory name")));
        }
        Ok(Self { name, meta })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<u64>,
    pub val: Range<u64>,
    pub test: Range<u64>,
}

impl Splits {
    /// Consecutive ranges of the given lengths starting at `start`.
    pub fn consecutive(start: u64, train: u64, val: u64, test: u64) -> Self {
        let a = start + train;
        let b = a + val;
        Self { train: start..a, val: a..b, test: b..b + test }
    }

    pub fn timeline(&self) -> Range<u64> {
        self.train.start..self.test.end
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.train.start < self.train.end
            && self.train.end == self.val.start
            && self.val.start <= self.val.end
            && self.val.end == self.test.start
            && self.test.start < self.test.end;
        if !ok {
            return Err(Error::config(format!("splits {self:?} must be non-empty, ordered and contiguous")));
        }
        Ok(())
    }

    pub fn split_of(&self, t: u64) -> Option<&'static str> {
        if self.train.contains(&t) {
            Some("train")
        } else if self.val.contains(&t) {
            Some("val")
        } else if self.test.contains(&t) {
            Some("test")
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyRecord {
    pub name: String,
    pub subset: String,
    pub fingerprint: String,
    pub height: usize,
    pub width: usize,
    pub nb: usize,
    pub ratio_exact: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub family: String,
    pub time: u64,
    pub split: String,
    /// Path relative to the dataset root.
    pub file: String,
    pub offset: u64,
    pub payload_bytes: u64,
    pub file_bytes: u64,
    /// Size of the field as 32-bit floats.
    pub pixel_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub pixel_bytes: u64,
    pub latent_bytes: u64,
    pub container_bytes: u64,
    pub sidecar_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub families: Vec<FamilyRecord>,
    pub splits: Splits,
    pub shards: Vec<ShardEntry>,
    pub totals: Totals,
}

impl Manifest {
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let path = root.as_ref().join(MANIFEST_FILE);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_slice(&fs::read(root.as_ref().join(MANIFEST_FILE))?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("manifest version {}, expected {MANIFEST_VERSION}", m.version)));
        }
        m.validate()?;
        Ok(m)
    }

    /// Coverage and totals invariants.
    pub fn validate(&self) -> Result<()> {
        self.splits.validate()?;
        let timeline = self.splits.timeline();
        for f in &self.families {
            let mut times: Vec<u64> = self.shards.iter().filter(|s| s.family == f.name).map(|s| s.time).collect();
            times.sort_unstable();
            if !times.iter().copied().eq(timeline.clone()) {
                return Err(Error::Format(format!("family {} does not cover steps {timeline:?} exactly once", f.name)));
            }
        }
        if let Some(s) = self.shards.iter().find(|s| !self.families.iter().any(|f| f.name == s.family)) {
            return Err(Error::Format(format!("shard for unknown family {}", s.family)));
        }
        let sum = |f: fn(&ShardEntry) -> u64| self.shards.iter().map(f).sum::<u64>();
        let t = &self.totals;
        if t.pixel_bytes != sum(|s| s.pixel_bytes)
            || t.latent_bytes != sum(|s| s.payload_bytes)
            || t.container_bytes != sum(|s| s.file_bytes)
        {
            return Err(Error::Format("manifest totals differ from the sum over shards".into()));
        }
        Ok(())
    }
}

/// Outcome of a build besides the manifest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub written: usize,
    pub skipped: usize,
}

fn shard_rel(family: &str, time: u64) -> String {
    format!("{family}/{time:08}.wlat")
}

/// A shard counts as complete when it parses in full and carries the
/// expected model fingerprint.
fn complete_shard(path: &Path, fingerprint: &[u8; 32]) -> bool {
    match fs::read(path) {
        Ok(b) => matches!(WlatFile::from_bytes(&b), Ok(f) if &f.header.fingerprint == fingerprint),
        Err(_) => false,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Compresses every timestep of `splits` for every family into `root`.
/// Complete shards written by the same model are kept; partial or stale
/// ones are rewritten.
pub fn build(
    archive: &(dyn Archive + Sync),
    families: &[(Family, &Wla)],
    splits: &Splits,
    root: impl AsRef<Path>,
) -> Result<(Manifest, BuildStats)> {
    let root = root.as_ref();
    splits.validate()?;
    if families.is_empty() {
        return Err(Error::config("no families to build"));
    }
    let available: std::collections::BTreeSet<u64> = archive.times().into_iter().collect();
    if let Some(t) = splits.timeline().find(|t| !available.contains(t)) {
        return Err(Error::Missing(format!("archive has no field at step {t}")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (fam, model) in families {
        if !seen.insert(&fam.name) {
            return Err(Error::config(format!("duplicate family {}", fam.name)));
        }
        if model.config.meta != fam.meta {
            return Err(Error::Missing(format!(
                "no model for family {} ({}); supplied model covers {}",
                fam.name, fam.meta, model.config.meta
            )));
        }
        fs::create_dir_all(root.join(&fam.name))?;
    }

    let jobs: Vec<(usize, u64)> =
        (0..families.len()).flat_map(|i| splits.timeline().map(move |t| (i, t))).collect();
    let fingerprints: Vec<[u8; 32]> = families.iter().map(|(_, m)| m.fingerprint()).collect();
    let results: Vec<Result<(ShardEntry, bool)>> = jobs
        .par_iter()
        .map(|&(i, t)| {
            let (fam, model) = &families[i];
            let rel = shard_rel(&fam.name, t);
            let path = root.join(&rel);
            let wrote = if complete_shard(&path, &fingerprints[i]) {
                false
            } else {
                let x = select_subset(archive, &fam.meta, t)?;
                write_atomic(&path, &compress(&x, model)?.to_bytes()?)?;
                true
            };
            let file_bytes = fs::metadata(&path)?.len();
            let cfg = &model.config;
            let (h, w) = model.token_grid();
            let payload_bytes = crate::bqm::LatentBits::payload_len(h, w, cfg.nb) as u64;
            Ok((
                ShardEntry {
                    family: fam.name.clone(),
                    time: t,
                    split: splits.split_of(t).expect("inside timeline").to_string(),
                    file: rel,
                    offset: file_bytes - payload_bytes,
                    payload_bytes,
                    file_bytes,
                    pixel_bytes: (cfg.meta.len() * cfg.height * cfg.width * 4) as u64,
                },
                wrote,
            ))
        })
        .collect();

    let mut stats = BuildStats::default();
    let mut shards = Vec::with_capacity(results.len());
    for r in results {
        let (s, wrote) = r?;
        if wrote {
            stats.written += 1;
        } else {
            stats.skipped += 1;
        }
        shards.push(s);
    }
    let families_rec = families
        .iter()
        .zip(&fingerprints)
        .map(|((fam, m), fp)| {
            let c = &m.config;
            Ok(FamilyRecord {
                name: fam.name.clone(),
                subset: fam.meta.to_string(),
                fingerprint: hex::encode(fp),
                height: c.height,
                width: c.width,
                nb: c.nb,
                ratio_exact: compression_ratio(c.meta.len(), c.height, c.width, &c.patch, c.nb)?.ratio_exact,
            })
        })
        .collect::<Result<_>>()?;
    let previous_sidecar = Manifest::load(root).map(|m| m.totals.sidecar_bytes).unwrap_or(0);
    let totals = Totals {
        pixel_bytes: shards.iter().map(|s| s.pixel_bytes).sum(),
        latent_bytes: shards.iter().map(|s| s.payload_bytes).sum(),
        container_bytes: shards.iter().map(|s| s.file_bytes).sum(),
        sidecar_bytes: previous_sidecar,
    };
    let manifest =
        Manifest { version: MANIFEST_VERSION, families: families_rec, splits: splits.clone(), shards, totals };
    manifest.validate()?;
    manifest.save(root)?;
    Ok((manifest, stats))
}

/// Raw and stored size of a sidecar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarReport {
    pub fields: usize,
    pub raw_bytes: u64,
    pub stored_bytes: u64,
}

/// Writes the fields at `range` losslessly to `path` as an xz stream of
/// `(time u64, length u64, wgrid bytes)` records. An empty range produces an
/// empty file.
pub fn pixel_sidecar(archive: &dyn Archive, range: Range<u64>, path: impl AsRef<Path>) -> Result<SidecarReport> {
    let times = archive.times();
    let (lo, hi) = match (times.iter().min(), times.iter().max()) {
        (Some(&a), Some(&b)) => (a, b + 1),
        _ => (0, 0),
    };
    if range.start < range.end && (range.start < lo || range.end > hi) {
        return Err(Error::Range(format!("sidecar range {range:?} outside timeline {lo}..{hi}")));
    }
    let mut raw = 0u64;
    let mut fields = 0;
    if range.is_empty() {
        fs::write(&path, [])?;
        return Ok(SidecarReport { fields, raw_bytes: 0, stored_bytes: 0 });
    }
    let file = fs::File::create(&path)?;
    let mut enc = xz2::write::XzEncoder::new(std::io::BufWriter::new(file), 9);
    for t in range {
        let bytes = wgrid::to_bytes(&archive.field(t)?);
        enc.write_u64::<LE>(t)?;
        enc.write_u64::<LE>(bytes.len() as u64)?;
        enc.write_all(&bytes)?;
        raw += bytes.len() as u64;
        fields += 1;
    }
    enc.finish()?.flush()?;
    Ok(SidecarReport { fields, raw_bytes: raw, stored_bytes: fs::metadata(&path)?.len() })
}

/// Inverse of [`pixel_sidecar`].
pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Vec<(u64, GridField)>> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut raw = Vec::new();
    xz2::read::XzDecoder::new(&bytes[..]).read_to_end(&mut raw)?;
    let mut cur = std::io::Cursor::new(&raw[..]);
    let mut out = Vec::new();
    while (cur.position() as usize) < raw.len() {
        let t = cur.read_u64::<LE>()?;
        let n = cur.read_u64::<LE>()? as usize;
        let start = cur.position() as usize;
        let end = start.checked_add(n).filter(|&e| e <= raw.len()).ok_or(Error::Truncated {
            expected: (start + n) as u64,
            actual: raw.len() as u64,
        })?;
        out.push((t, wgrid::from_bytes(&raw[start..end])?));
        cur.set_position(end as u64);
    }
    Ok(out)
}

/// Records a sidecar's size in the manifest at `root`.
pub fn attach_sidecar(root: impl AsRef<Path>, report: &SidecarReport) -> Result<Manifest> {
    let mut m = Manifest::load(&root)?;
    m.totals.sidecar_bytes = report.stored_bytes;
    m.save(root)?;
    Ok(m)
}

/// Storage totals in bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountReport {
    pub pixel_total: f64,
    pub latent_total: f64,
    pub sidecar_total: f64,
    /// `pixel_total / latent_total`.
    pub ratio: f64,
    pub per_family: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl AccountReport {
    pub fn from_totals(pixel_total: f64, latent_total: f64, sidecar_total: f64) -> Result<Self> {
        if !(pixel_total > 0.0 && latent_total > 0.0) {
            return Err(Error::Range("account totals must be positive".into()));
        }
        Ok(Self {
            pixel_total,
            latent_total,
            sidecar_total,
            ratio: pixel_total / latent_total,
            per_family: BTreeMap::new(),
            notes: Vec::new(),
        })
    }

    pub fn latent_tb(&self) -> f64 {
        self.latent_total / TB
    }

    /// Itemized text with unrounded and two-decimal TB figures.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, k: &str, v: f64| {
            let _ = writeln!(s, "{k:<14}{:>22.0} B  {:>14.6} TB  ({:.2} TB)", v, v / TB, v / TB);
        };
        line(&mut s, "pixel", self.pixel_total);
        line(&mut s, "latent", self.latent_total);
        line(&mut s, "sidecar", self.sidecar_total);
        line(&mut s, "latent+sidecar", self.latent_total + self.sidecar_total);
        let _ = writeln!(s, "{:<14}{:>22.4}", "ratio", self.ratio);
        for (k, v) in &self.per_family {
            let _ = writeln!(s, "  ratio[{k}] {v:.4}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "NOTE: {n}");
        }
        s
    }
}

/// Accounting over a built dataset; latent bytes are payloads only.
pub fn account(manifest: &Manifest) -> Result<AccountReport> {
    let t = manifest.totals;
    let mut r = AccountReport::from_totals(t.pixel_bytes as f64, t.latent_bytes as f64, t.sidecar_bytes as f64)?;
    let mut per: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for s in &manifest.shards {
        let e = per.entry(s.family.clone()).or_default();
        e.0 += s.pixel_bytes;
        e.1 += s.payload_bytes;
    }
    r.per_family = per.into_iter().map(|(k, (p, l))| (k, p as f64 / l as f64)).collect();
    let overhead = t.container_bytes.saturating_sub(t.latent_bytes);
    r.notes.push(format!("container headers add {overhead} B not counted in the ratio"));
    Ok(r)
}

/// Totals as published for the full dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedTotals {
    pub pixel_tb: f64,
    pub latent_tb: f64,
    pub ratio: f64,
    pub sidecar_tb: f64,
}

impl PublishedTotals {
    pub const ERA5_LATENT: Self = Self { pixel_tb: 244.34, latent_tb: 0.43, ratio: 566.3, sidecar_tb: 0.117 };
}

/// Re-derives the latent total from the stated pixel total and ratio and
/// flags disagreement with the stated (rounded) latent total.
pub fn account_published(p: &PublishedTotals) -> Result<AccountReport> {
    let pixel = p.pixel_tb * TB;
    let mut r = AccountReport::from_totals(pixel, pixel / p.ratio, p.sidecar_tb * TB)?;
    let implied = p.pixel_tb / p.latent_tb;
    let derived = r.latent_tb();
    r.notes.push(format!(
        "{} TB / {} = {derived:.4} TB, rounds to {:.2} TB (stated {} TB)",
        p.pixel_tb, p.ratio, derived, p.latent_tb
    ));
    if (implied - p.ratio).abs() / p.ratio > 1e-3 {
        r.notes.push(format!(
            "rounding discrepancy: {} TB / {} TB = {implied:.1}, stated ratio is {}; the stated latent total is rounded",
            p.pixel_tb, p.latent_tb, p.ratio
        ));
    }
    r.notes.push(format!("sidecar of {} TB is listed separately and not included in the ratio", p.sidecar_tb));
    Ok(r)
}

/// Directory layout helper for callers that keep several datasets.
pub fn shard_path(root: impl AsRef<Path>, entry: &ShardEntry) -> PathBuf {
    root.as_ref().join(&entry.file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_render() {
        let r = account_published(&PublishedTotals::ERA5_LATENT).unwrap();
        assert!((r.latent_tb() - 0.4315).abs() < 1e-4);
        assert_eq!(format!("{:.2}", r.latent_tb()), "0.43");
        assert!(r.notes.iter().any(|n| n.contains("568.2") && n.contains("566.3")));
        assert!(r.render().contains("NOTE: rounding discrepancy"));
    }

    #[test]
    fn equal_totals_give_unit_ratio() {
        assert_eq!(AccountReport::from_totals(5.0, 5.0, 0.0).unwrap().ratio, 1.0);
    }

    #[test]
    fn splits_are_checked() {
        let s = Splits::consecutive(0, 70, 15, 15);
        s.validate().unwrap();
        assert_eq!(s.split_of(84), Some("val"));
        let bad = Splits { train: 0..10, val: 11..12, test: 12..13 };
        assert!(bad.validate().is_err());
    }
}
