//! Binary checkpoint file.
//!
//! ```text
//! "THM1" | version u8 | key=value lines | blank line
//! per tensor: name_len u32 | name | rank u32 | dims u32... | f32 payload
//! ```
//!
//! All integers and floats are little-endian. Values are stored as 32-bit
//! floats; parameters are kept f32-representable so loading is exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::Model;
use crate::error::{Error, Result};
use crate::kv;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"THM1";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    /// Extra header keys beyond the model configuration and step.
    pub meta: BTreeMap<String, String>,
    /// Named tensors in model-construction order, followed by any extras.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Self {
        Self {
            config: model.config.clone(),
            step,
            meta: BTreeMap::new(),
            tensors: model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let mut header: Vec<(String, String)> = self
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        header.push(("step".into(), self.step.to_string()));
        for (k, v) in &self.meta {
            if v.contains('\n') || k.contains('=') || k.contains('\n') {
                return Err(Error::format(format!("header entry {k:?} cannot be encoded")));
            }
            header.push((k.clone(), v.clone()));
        }
        out.extend_from_slice(kv::render(header).as_bytes());
        out.push(b'\n');
        let u32_of = |n: usize| {
            u32::try_from(n).map_err(|_| Error::format(format!("{n} does not fit in 32 bits")))
        };
        for (name, t) in &self.tensors {
            out.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_of(t.shape().len())?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&u32_of(d)?.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let end = bytes[r.pos..]
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::format("checkpoint header is not terminated"))?;
        let header = std::str::from_utf8(r.take(end + 1)?)
            .map_err(|_| Error::format("checkpoint header is not UTF-8"))?;
        r.take(1)?;
        let mut map = kv::parse(header)?;
        let step = kv::require(&mut map, "step")?;
        let meta_keys: Vec<String> = map
            .keys()
            .filter(|k| !ModelConfig::KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        let meta = meta_keys
            .into_iter()
            .map(|k| {
                let v = map.remove(&k).expect("key present");
                (k, v)
            })
            .collect();
        let config = ModelConfig::from_map(&mut map)?;

        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::format("parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(format!("tensor {name} is too large")))?;
            let payload = r.take(count.checked_mul(4).ok_or_else(|| Error::format("tensor too large"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self {
            config,
            step,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), 0)?;
        model.load_values(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(model)
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
            .ok_or_else(|| Error::format("checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.to_model()
    }
}
