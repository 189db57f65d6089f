//! EMOP model container.
//!
//! ```text
//! magic        b"EMOP"
//! version      u16 = 1
//! desc_len     u32, followed by desc_len bytes of UTF-8 JSON (ModelConfig)
//! count        u32 tensors, each:
//!   name_len   u16, followed by the UTF-8 name
//!   rank       u8
//!   dims       rank * u32
//!   payload    prod(dims) * f32
//! ```
//!
//! All integers and floats are little-endian. Biases and the attention
//! vector are rank 1, weight matrices rank 2. Tensors are written in
//! [`Model::params`] order, so identical models give identical bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const MAGIC: &[u8; 4] = b"EMOP";
pub const VERSION: u16 = 1;

fn is_vector(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".b_att") || name.ends_with(".v")
}

pub fn encode(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let desc = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(&desc);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let (r, c) = p.value.shape();
        if is_vector(&name) {
            out.push(1);
            out.extend_from_slice(&(c as u32).to_le_bytes());
        } else {
            out.push(2);
            out.extend_from_slice(&(r as u32).to_le_bytes());
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a container and validates every tensor against the layout its
/// descriptor implies.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let mut rd = Reader { bytes, pos: 0, path };
    if rd.take(4)? != MAGIC {
        rd.pos = 0;
        return Err(rd.fail("bad magic, not an EMOP model"));
    }
    let version = rd.u16()?;
    if version != VERSION {
        return Err(rd.fail(format!("unsupported version {version}")));
    }
    let desc_len = rd.u32()? as usize;
    let desc_at = rd.pos;
    let config: ModelConfig = serde_json::from_slice(rd.take(desc_len)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: desc_at as u64,
        msg: format!("bad model descriptor: {e}"),
    })?;
    let mut model = Model::<f32>::build(config, &mut Rng::new(0))?;
    let expected: HashMap<String, (usize, usize)> =
        model.params().into_iter().map(|(n, p)| (n, p.value.shape())).collect();

    let count = rd.u32()? as usize;
    let mut loaded: HashMap<String, Matrix<f32>> = HashMap::new();
    for _ in 0..count {
        let name_len = rd.u16()? as usize;
        let name = std::str::from_utf8(rd.take(name_len)?)
            .map_err(|_| rd.fail("tensor name is not UTF-8"))?
            .to_string();
        let rank = rd.u8()?;
        let dims: Vec<usize> = (0..rank).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let shape = match dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(rd.fail(format!("tensor `{name}` has unsupported rank {rank}"))),
        };
        let want = *expected
            .get(&name)
            .ok_or_else(|| rd.fail(format!("unexpected tensor `{name}` for this variant")))?;
        if shape != want || (rank == 1) != is_vector(&name) {
            return Err(rd.fail(format!("tensor `{name}` has shape {dims:?}, expected {want:?}")));
        }
        let payload_at = rd.pos;
        let raw = rd.take(4 * shape.0 * shape.1)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            rd.pos = payload_at;
            return Err(rd.fail(format!("tensor `{name}` has non-finite values")));
        }
        if loaded.insert(name.clone(), Matrix::new(shape.0, shape.1, data)?).is_some() {
            return Err(rd.fail(format!("duplicate tensor `{name}`")));
        }
    }
    if rd.pos != bytes.len() {
        return Err(rd.fail("trailing bytes after last tensor"));
    }
    for (name, p) in model.params_mut() {
        let value = loaded
            .remove(&name)
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset: bytes.len() as u64,
                msg: format!("missing tensor `{name}`"),
            })?;
        p.value = value;
        p.zero_grad();
    }
    Ok(model)
}
