//! `.wgrid` files.
//!
//! ```text
//! magic    4 bytes "WGRD"
//! version  u16
//! C, H, W  u32 each
//! lats     f64 x H (degrees)
//! lons     f64 x W (degrees)
//! meta     C x (variable code u16, level u16; 0xFFFF = surface)
//! values   f32 x C*H*W, channel-major, row-major planes
//! ```
//! All fields little-endian.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::field::GridField;
use super::meta::{Level, MetaEntry, PvsMeta, VariableId};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WGRD";
pub const VERSION: u16 = 1;

pub fn header_len(c: usize, h: usize, w: usize) -> usize {
    4 + 2 + 12 + 8 * (h + w) + 4 * c
}

pub fn encoded_len(f: &GridField) -> usize {
    header_len(f.channels(), f.height(), f.width()) + 4 * f.values().len()
}

pub fn to_bytes(f: &GridField) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_len(f));
    write(&mut buf, f).expect("writing to memory");
    buf
}

pub fn write<W: Write>(out: &mut W, f: &GridField) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_u16::<LE>(VERSION)?;
    out.write_u32::<LE>(f.channels() as u32)?;
    out.write_u32::<LE>(f.height() as u32)?;
    out.write_u32::<LE>(f.width() as u32)?;
    for &l in f.lats() {
        out.write_f64::<LE>(l)?;
    }
    for &l in f.lons() {
        out.write_f64::<LE>(l)?;
    }
    for e in f.meta().entries() {
        out.write_u16::<LE>(e.variable.code())?;
        out.write_u16::<LE>(e.level.code())?;
    }
    let mut payload = Vec::with_capacity(4 * f.values().len());
    for &v in f.values() {
        payload.write_f32::<LE>(v)?;
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<GridField> {
    let total = bytes.len() as u64;
    if total < 18 {
        if total >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::Format("bad wgrid magic".into()));
        }
        return Err(Error::Truncated { expected: 18, actual: total });
    }
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad wgrid magic {magic:?}")));
    }
    let version = cur.read_u16::<LE>()?;
    if version != VERSION {
        return Err(Error::Format(format!("wgrid version {version}, expected {VERSION}")));
    }
    let c = cur.read_u32::<LE>()? as usize;
    let h = cur.read_u32::<LE>()? as usize;
    let w = cur.read_u32::<LE>()? as usize;
    let expected = (header_len(c, h, w) + 4 * c * h * w) as u64;
    if total < expected {
        return Err(Error::Truncated { expected, actual: total });
    }
    let mut lats = vec![0f64; h];
    cur.read_f64_into::<LE>(&mut lats)?;
    let mut lons = vec![0f64; w];
    cur.read_f64_into::<LE>(&mut lons)?;
    let mut entries = Vec::with_capacity(c);
    for _ in 0..c {
        let v = VariableId::from_code(cur.read_u16::<LE>()?)?;
        let l = Level::from_code(cur.read_u16::<LE>()?);
        entries.push(MetaEntry::new(v, l));
    }
    let mut values = vec![0f32; c * h * w];
    cur.read_f32_into::<LE>(&mut values)?;
    GridField::new(PvsMeta::new(entries)?, lats, lons, values)
}

pub fn save(f: &GridField, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    write(&mut file, f)?;
    file.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<GridField> {
    from_bytes(&fs::read(path)?)
}
