//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u64` header length,
//! JSON header, then every tensor as little-endian `f32` in header order:
//! parameters first, followed by Adam first and second moments.

use std::collections::BTreeMap;
use std::path::Path;

use dualdiff::optim::Adam;
use dualdiff::{cnp, Error, ParamStore, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"DDIFFCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    config: RunConfig,
    frozen: Vec<String>,
    adam_step: u64,
    params: Vec<Entry>,
    moments: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of optimizer steps taken.
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| ckpt_err("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 4)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Tensor::from_vec(shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = |m: &BTreeMap<String, Tensor<f32>>| m.iter().map(|(k, t)| Entry { name: k.clone(), shape: t.shape().to_vec() }).collect();
        if self.adam.m.keys().ne(self.adam.v.keys()) {
            return Err(ckpt_err("Adam first and second moments cover different parameters"));
        }
        let header = Header {
            dtype: "f32".into(),
            step: self.step,
            config: self.config.clone(),
            frozen: self.params.frozen_prefixes().cloned().collect(),
            adam_step: self.adam.step,
            params: self.params.iter().map(|(k, t)| Entry { name: k.clone(), shape: t.shape().to_vec() }).collect(),
            moments: entries(&self.adam.m),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            push_tensor(&mut out, t);
        }
        for t in self.adam.m.values().chain(self.adam.v.values()) {
            push_tensor(&mut out, t);
        }
        Ok(out)
    }

    /// Decode and verify that the parameter set matches the stored architecture.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ckpt_err("not a dualdiff checkpoint"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        if header.dtype != "f32" {
            return Err(ckpt_err(format!("unsupported dtype {}", header.dtype)));
        }
        let mut params = ParamStore::new();
        for e in &header.params {
            params.insert(e.name.clone(), r.tensor(&e.shape)?);
        }
        for p in &header.frozen {
            params.freeze_prefix(p.clone());
        }
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in &header.moments {
            m.insert(e.name.clone(), r.tensor(&e.shape)?);
        }
        for e in &header.moments {
            v.insert(e.name.clone(), r.tensor(&e.shape)?);
        }
        if r.pos != buf.len() {
            return Err(ckpt_err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let reference = cnp::init_params::<f32>(&header.config.cnp, 0)?;
        params.check_closure(&reference)?;
        if let Some(name) = m.keys().find(|k| params.get(k).is_none()) {
            return Err(ckpt_err(format!("optimizer state for unknown parameter `{name}`")));
        }
        let mut adam = Adam::new(header.config.optim)?;
        adam.step = header.adam_step;
        adam.m = m;
        adam.v = v;
        Ok(Self { config: header.config, step: header.step, params, adam })
    }

    /// Write atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ckpt_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
