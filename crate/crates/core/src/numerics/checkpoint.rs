//! Named-tensor container.
//!
//! ```text
//! magic      4 bytes  "WCKP"
//! version    u16
//! meta_len   u32      length of the JSON metadata blob
//! meta       meta_len bytes (UTF-8 JSON)
//! count      u32      number of tensors
//! count x { name_len u16, name, ndim u8, dims u32 x ndim }
//! payloads   f32 values of every tensor, in table order
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WCKP";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl TensorFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut buf = Vec::new();
        buf.write_all(MAGIC)?;
        buf.write_u16::<LE>(VERSION)?;
        buf.write_u32::<LE>(meta.len() as u32)?;
        buf.write_all(&meta)?;
        buf.write_u32::<LE>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            buf.write_u16::<LE>(name.len() as u16)?;
            buf.write_all(name.as_bytes())?;
            buf.write_u8(t.shape().len() as u8)?;
            for &d in t.shape() {
                buf.write_u32::<LE>(d as u32)?;
            }
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                buf.write_f32::<LE>(v)?;
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let total = bytes.len() as u64;
        let trunc = |need: u64| Error::Truncated { expected: need, actual: total };
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| trunc(4))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = cur.read_u16::<LE>().map_err(|_| trunc(6))?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let meta_len = cur.read_u32::<LE>().map_err(|_| trunc(10))? as usize;
        let mut meta = vec![0u8; meta_len];
        cur.read_exact(&mut meta).map_err(|_| trunc(10 + meta_len as u64))?;
        let meta: serde_json::Value = serde_json::from_slice(&meta)?;
        let count = cur.read_u32::<LE>().map_err(|_| trunc(cur.position() + 4))?;
        let mut table = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let pos = cur.position();
            let nlen = cur.read_u16::<LE>().map_err(|_| trunc(pos + 2))? as usize;
            let mut name = vec![0u8; nlen];
            cur.read_exact(&mut name).map_err(|_| trunc(pos + 2 + nlen as u64))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = cur.read_u8().map_err(|_| trunc(cur.position() + 1))? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.read_u32::<LE>().map_err(|_| trunc(cur.position() + 4))? as usize);
            }
            table.push((name, dims));
        }
        let payload: u64 = table.iter().map(|(_, d)| d.iter().product::<usize>() as u64 * 4).sum();
        let need = cur.position() + payload;
        if need > total {
            return Err(trunc(need));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, dims) in table {
            let n: usize = dims.iter().product();
            let mut data = vec![0f32; n];
            cur.read_f32_into::<LE>(&mut data)?;
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
