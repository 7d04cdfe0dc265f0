//! `WMCK` checkpoint container.
//!
//! Layout (little-endian): magic `WMCK`, u32 version, u32 config length,
//! canonical config JSON, u32 tensor count, then per tensor: u32 name
//! length, UTF-8 name, u32 rank, u32 extents, f32 row-major data.

use std::fs;
use std::path::Path;

use wm_kernel::{ParamSet, Tensor};

use super::{Model, ModelConfig};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WMCK";
const VERSION: u32 = 1;

pub fn to_bytes(config: &ExperimentConfig, model: &Model<f32>) -> Result<Vec<u8>> {
    let json = config.to_canonical_json()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(json.as_bytes());
    put_u32(&mut out, model.params().len() as u32);
    for (name, t) in model.params().iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &e in t.shape() {
            put_u32(&mut out, e as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ExperimentConfig, Model<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("missing WMCK magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let json = std::str::from_utf8(r.take(len)?).map_err(|e| bad(e.to_string()))?;
    let config = ExperimentConfig::from_json(json)?;
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| bad(e.to_string()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let model = Model::from_params(ModelConfig::from_experiment(&config), params)?;
    Ok((config, model))
}

pub fn save(path: &Path, config: &ExperimentConfig, model: &Model<f32>) -> Result<()> {
    fs::write(path, to_bytes(config, model)?).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<(ExperimentConfig, Model<f32>)> {
    from_bytes(&fs::read(path).map_err(Error::io(path))?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
