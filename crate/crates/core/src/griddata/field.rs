use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::meta::PvsMeta;
use super::wgrid;
use crate::error::{Error, Result};

/// `C x H x W` field on a latitude/longitude grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    meta: PvsMeta,
    lats: Vec<f64>,
    lons: Vec<f64>,
    values: Vec<f32>,
}

/// Cell-centred latitudes, north to south.
pub fn default_lats(h: usize) -> Vec<f64> {
    (0..h).map(|i| 90.0 - (i as f64 + 0.5) * 180.0 / h as f64).collect()
}

/// Equatorial global grid latitudes including both poles (the 0.25 degree
/// 721-row convention).
pub fn inclusive_lats(h: usize) -> Vec<f64> {
    if h == 1 {
        return vec![0.0];
    }
    (0..h).map(|i| 90.0 - i as f64 * 180.0 / (h - 1) as f64).collect()
}

pub fn default_lons(w: usize) -> Vec<f64> {
    (0..w).map(|j| j as f64 * 360.0 / w as f64).collect()
}

impl GridField {
    pub fn new(meta: PvsMeta, lats: Vec<f64>, lons: Vec<f64>, values: Vec<f32>) -> Result<Self> {
        let (c, h, w) = (meta.len(), lats.len(), lons.len());
        if values.len() != c * h * w {
            return Err(Error::shape(format!("{} values for {c}x{h}x{w}", values.len())));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("empty grid"));
        }
        let asc = lats.windows(2).all(|p| p[1] > p[0]);
        let desc = lats.windows(2).all(|p| p[1] < p[0]);
        if !(asc || desc) {
            return Err(Error::config("latitudes must be strictly monotonic"));
        }
        if lats.iter().any(|l| l.abs() > 90.0) {
            return Err(Error::Range("latitude beyond +-90".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("value at flat index {i}")));
        }
        Ok(Self { meta, lats, lons, values })
    }

    /// Field on the default cell-centred grid.
    pub fn on_default_grid(meta: PvsMeta, h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(meta, default_lats(h), default_lons(w), values)
    }

    pub fn meta(&self) -> &PvsMeta {
        &self.meta
    }

    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.meta.len()
    }

    pub fn height(&self) -> usize {
        self.lats.len()
    }

    pub fn width(&self) -> usize {
        self.lons.len()
    }

    pub fn plane_len(&self) -> usize {
        self.height() * self.width()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.values[c * n..(c + 1) * n]
    }

    /// Same grid, new values and subset description.
    pub fn with_values(&self, meta: PvsMeta, values: Vec<f32>) -> Result<Self> {
        Self::new(meta, self.lats.clone(), self.lons.clone(), values)
    }

    /// Channels reordered and filtered to `meta`.
    pub fn select(&self, meta: &PvsMeta) -> Result<Self> {
        let n = self.plane_len();
        let mut values = Vec::with_capacity(meta.len() * n);
        for e in meta.entries() {
            let c = self
                .meta
                .position(e)
                .ok_or_else(|| Error::Missing(format!("{e} not present in field")))?;
            values.extend_from_slice(self.channel(c));
        }
        Ok(Self { meta: meta.clone(), lats: self.lats.clone(), lons: self.lons.clone(), values })
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.lats == other.lats && self.lons == other.lons
    }
}

/// Time-indexed source of full multi-variable fields.
pub trait Archive {
    fn times(&self) -> Vec<u64>;
    fn field(&self, time: u64) -> Result<GridField>;
}

/// Extract the subset `meta` at `time`, channels in `meta` order.
pub fn select_subset(archive: &dyn Archive, meta: &PvsMeta, time: u64) -> Result<GridField> {
    archive.field(time)?.select(meta)
}

#[derive(Clone, Debug, Default)]
pub struct MemoryArchive {
    fields: BTreeMap<u64, GridField>,
}

impl MemoryArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, time: u64, field: GridField) {
        self.fields.insert(time, field);
    }
}

impl Archive for MemoryArchive {
    fn times(&self) -> Vec<u64> {
        self.fields.keys().copied().collect()
    }

    fn field(&self, time: u64) -> Result<GridField> {
        self.fields
            .get(&time)
            .cloned()
            .ok_or_else(|| Error::Missing(format!("no field at time {time}")))
    }
}

/// Directory of `t<time>.wgrid` files.
#[derive(Clone, Debug)]
pub struct DirArchive {
    root: PathBuf,
}

impl DirArchive {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(root: &Path, time: u64) -> PathBuf {
        root.join(format!("t{time:06}.wgrid"))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl Archive for DirArchive {
    fn times(&self) -> Vec<u64> {
        let mut out: Vec<u64> = std::fs::read_dir(&self.root)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix('t')?.strip_suffix(".wgrid")?.parse().ok()
            })
            .collect();
        out.sort_unstable();
        out
    }

    fn field(&self, time: u64) -> Result<GridField> {
        let p = Self::path_for(&self.root, time);
        if !p.exists() {
            return Err(Error::Missing(format!("no field at time {time} ({})", p.display())));
        }
        wgrid::load(p)
    }
}
