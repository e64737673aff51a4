use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weather variables, with stable serialization codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariableId {
    /// Geopotential.
    Z,
    U,
    V,
    /// Vertical velocity.
    W,
    T,
    /// Specific humidity.
    Q,
    U10,
    V10,
    U100,
    V100,
    T2m,
    Tcc,
    Sp,
    Msl,
    Tp1h,
    Tp2h,
    Tp3h,
    Tp4h,
    Tp5h,
    Tp6h,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariableKind {
    UpperAir,
    Surface,
    Precipitation,
}

impl VariableId {
    pub const ALL: [VariableId; 20] = [
        Self::Z,
        Self::U,
        Self::V,
        Self::W,
        Self::T,
        Self::Q,
        Self::U10,
        Self::V10,
        Self::U100,
        Self::V100,
        Self::T2m,
        Self::Tcc,
        Self::Sp,
        Self::Msl,
        Self::Tp1h,
        Self::Tp2h,
        Self::Tp3h,
        Self::Tp4h,
        Self::Tp5h,
        Self::Tp6h,
    ];

    pub const UPPER_AIR: [VariableId; 6] = [Self::Z, Self::U, Self::V, Self::W, Self::T, Self::Q];

    pub fn code(self) -> u16 {
        match self {
            Self::Z => 0,
            Self::U => 1,
            Self::V => 2,
            Self::W => 3,
            Self::T => 4,
            Self::Q => 5,
            Self::U10 => 10,
            Self::V10 => 11,
            Self::U100 => 12,
            Self::V100 => 13,
            Self::T2m => 14,
            Self::Tcc => 15,
            Self::Sp => 16,
            Self::Msl => 17,
            Self::Tp1h => 20,
            Self::Tp2h => 21,
            Self::Tp3h => 22,
            Self::Tp4h => 23,
            Self::Tp5h => 24,
            Self::Tp6h => 25,
        }
    }

    pub fn from_code(code: u16) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown variable code {code}")))
    }

    /// Dense index into embedding tables.
    pub fn ordinal(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).expect("listed")
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Self::Z => "z",
            Self::U => "u",
            Self::V => "v",
            Self::W => "w",
            Self::T => "t",
            Self::Q => "q",
            Self::U10 => "10u",
            Self::V10 => "10v",
            Self::U100 => "100u",
            Self::V100 => "100v",
            Self::T2m => "t2m",
            Self::Tcc => "tcc",
            Self::Sp => "sp",
            Self::Msl => "msl",
            Self::Tp1h => "tp1h",
            Self::Tp2h => "tp2h",
            Self::Tp3h => "tp3h",
            Self::Tp4h => "tp4h",
            Self::Tp5h => "tp5h",
            Self::Tp6h => "tp6h",
        }
    }

    pub fn kind(self) -> VariableKind {
        match self {
            Self::Z | Self::U | Self::V | Self::W | Self::T | Self::Q => VariableKind::UpperAir,
            Self::Tp1h | Self::Tp2h | Self::Tp3h | Self::Tp4h | Self::Tp5h | Self::Tp6h => {
                VariableKind::Precipitation
            }
            _ => VariableKind::Surface,
        }
    }
}

/// Vertical coordinate of a channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Hpa(u16),
    Surface,
}

impl Level {
    pub const SURFACE_CODE: u16 = 0xFFFF;

    pub fn code(self) -> u16 {
        match self {
            Level::Hpa(p) => p,
            Level::Surface => Self::SURFACE_CODE,
        }
    }

    pub fn from_code(code: u16) -> Self {
        if code == Self::SURFACE_CODE {
            Level::Surface
        } else {
            Level::Hpa(code)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetaEntry {
    pub variable: VariableId,
    pub level: Level,
}

impl MetaEntry {
    pub fn new(variable: VariableId, level: Level) -> Self {
        Self { variable, level }
    }

    pub fn upper(variable: VariableId, hpa: u16) -> Self {
        Self { variable, level: Level::Hpa(hpa) }
    }

    pub fn surface(variable: VariableId) -> Self {
        Self { variable, level: Level::Surface }
    }
}

impl fmt::Display for MetaEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.level {
            Level::Hpa(p) => write!(f, "{}{p}", self.variable.short_name()),
            Level::Surface => f.write_str(self.variable.short_name()),
        }
    }
}

impl FromStr for MetaEntry {
    type Err = Error;

    /// `t850`, `q1000`, `10u`, `tp6h`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        for v in VariableId::ALL {
            if v.kind() != VariableKind::UpperAir && s == v.short_name() {
                return Ok(Self::surface(v));
            }
        }
        let split = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
        let (name, digits) = s.split_at(split);
        let variable = VariableId::UPPER_AIR
            .into_iter()
            .find(|v| v.short_name() == name)
            .ok_or_else(|| Error::Missing(format!("unknown variable in '{s}'")))?;
        let hpa: u16 = digits
            .parse()
            .map_err(|_| Error::Config(format!("bad pressure level in '{s}'")))?;
        Ok(Self::upper(variable, hpa))
    }
}

/// Ordered channel description of a pressure-variable subset.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<MetaEntry>", into = "Vec<MetaEntry>")]
pub struct PvsMeta {
    entries: Vec<MetaEntry>,
}

impl TryFrom<Vec<MetaEntry>> for PvsMeta {
    type Error = Error;
    fn try_from(v: Vec<MetaEntry>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PvsMeta> for Vec<MetaEntry> {
    fn from(m: PvsMeta) -> Self {
        m.entries
    }
}

/// 6-level upper-air subset.
pub const LEVELS_6: [u16; 6] = [200, 300, 500, 700, 850, 1000];
/// 13-level upper-air subset.
pub const LEVELS_13: [u16; 13] = [50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000];
/// 25-level upper-air subset.
pub const LEVELS_25: [u16; 25] = [
    50, 100, 125, 150, 175, 200, 225, 250, 300, 350, 400, 450, 500, 550, 600, 650, 700, 750, 800,
    850, 900, 925, 950, 975, 1000,
];

impl PvsMeta {
    pub fn new(entries: Vec<MetaEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::config("empty pressure-variable subset"));
        }
        for (i, e) in entries.iter().enumerate() {
            let needs_level = e.variable.kind() == VariableKind::UpperAir;
            match (needs_level, e.level) {
                (true, Level::Surface) => {
                    return Err(Error::config(format!("{} needs a pressure level", e.variable.short_name())))
                }
                (false, Level::Hpa(_)) => {
                    return Err(Error::config(format!("{} is a single-level variable", e.variable.short_name())))
                }
                (true, Level::Hpa(0)) => return Err(Error::config("pressure level 0 hPa")),
                _ => {}
            }
            if entries[..i].contains(e) {
                return Err(Error::config(format!("duplicate entry {e}")));
            }
        }
        Ok(Self { entries })
    }

    /// Comma-separated entries, e.g. `t500,t850,10u`.
    pub fn parse_list(s: &str) -> Result<Self> {
        Self::new(s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_>>()?)
    }

    pub fn upper_air(variable: VariableId, levels: &[u16]) -> Result<Self> {
        Self::new(levels.iter().map(|&p| MetaEntry::upper(variable, p)).collect())
    }

    pub fn surface8() -> Self {
        use VariableId::*;
        Self::new([V10, U10, V100, U100, T2m, Tcc, Sp, Msl].map(MetaEntry::surface).to_vec())
            .expect("valid")
    }

    pub fn surface4() -> Self {
        use VariableId::*;
        Self::new([V10, U10, Tcc, Msl].map(MetaEntry::surface).to_vec()).expect("valid")
    }

    pub fn precipitation6() -> Self {
        use VariableId::*;
        Self::new([Tp1h, Tp2h, Tp3h, Tp4h, Tp5h, Tp6h].map(MetaEntry::surface).to_vec())
            .expect("valid")
    }

    pub fn entries(&self) -> &[MetaEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn position(&self, e: &MetaEntry) -> Option<usize> {
        self.entries.iter().position(|x| x == e)
    }

    /// Reorder by `perm`: entry `i` of the result is entry `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(perm.iter().map(|&i| self.entries[i]).collect())
    }
}

impl fmt::Display for PvsMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}
