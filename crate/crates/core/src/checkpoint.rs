//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `"CHMS"`, version `u32`, header length `u32`, header JSON
//! `{"config":..,"config_hash":..}`, tensor count `u32`, then per tensor
//! name length `u32`, UTF-8 name, dtype `u8` (0 = f32), rank `u32`,
//! dims `u64` each, data as f32.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{write_atomic, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CHMS";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: RunConfig,
    pub config_hash: String,
}

pub fn encode<T: Real>(config: &RunConfig, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let header = Header {
        config: config.clone(),
        config_hash: config.hash(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.tensor.data() {
            out.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parsed checkpoint: header plus tensors in file order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("{name}: unknown dtype {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if !r.buf.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", r.buf.len())));
    }
    checkpoint_checked(Checkpoint { header, tensors })
}

fn checkpoint_checked(c: Checkpoint) -> Result<Checkpoint> {
    if c.header.config.hash() != c.header.config_hash {
        return Err(Error::Format("header hash does not match its config".into()));
    }
    Ok(c)
}

pub fn save<T: Real>(path: &Path, config: &RunConfig, params: &ParamStore<T>) -> Result<()> {
    write_atomic(path, &encode(config, params)?)
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

impl Checkpoint {
    /// Copies the stored tensors into `params`; names, order and shapes must
    /// match exactly.
    pub fn load_into<T: Real>(&self, params: &mut ParamStore<T>) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", params.len(), self.tensors.len())));
        }
        for (p, (name, t)) in params.iter_mut().zip(&self.tensors) {
            if &p.name != name || p.tensor.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            for (d, s) in p.tensor.data_mut().iter_mut().zip(t.data()) {
                *d = T::from_f64(*s as f64);
            }
        }
        Ok(())
    }

    /// Rebuilds the model described by the header and fills its weights.
    pub fn model<T: Real>(&self) -> Result<Model<T>> {
        let mut m = Model::build(&self.header.config.model)?;
        self.load_into(&mut m.params)?;
        Ok(m)
    }
}

pub fn write_to(w: &mut impl Write, config: &RunConfig, params: &ParamStore<f32>) -> Result<()> {
    w.write_all(&encode(config, params)?)?;
    Ok(())
}
