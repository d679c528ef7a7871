//! Binary checkpoint: header, configuration text, named tensor table.
//!
//! Layout (all integers little-endian):
//! - 8-byte magic `WMCKPT\0\0`, `u32` format version;
//! - `u32` length + UTF-8 JSON of [`CheckpointConfig`];
//! - `u32` tensor count, then per tensor: `u16` name length, name bytes,
//!   `u8` rank, `u32` dims, `f32` payload;
//! - `u64` FNV-1a checksum of every preceding byte.
//!
//! Parameter names carry their owner as a prefix (`model.`, `tok.`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Array, ParamStore, Real};
use crate::tokenizer::{TokenizerConfig, TokenizerNet};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"WMCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: Option<ModelConfig>,
    pub tokenizer: Option<TokenizerConfig>,
    pub train: Option<TrainConfig>,
    /// Free-form provenance such as the producing command and seed.
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub tensors: Vec<(String, Array<f32>)>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new(config: CheckpointConfig) -> Self {
        Self {
            config,
            tensors: Vec::new(),
        }
    }

    /// Adds every parameter of `store` under `prefix`, converted to f32.
    pub fn add_store<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, v) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), v.cast()));
        }
    }

    /// Parameters under `prefix`, with the prefix removed, in stored order.
    pub fn store<T: Real>(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, v) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, v.cast());
            }
        }
        out
    }

    pub fn model<T: Real>(&self) -> Result<Model<T>> {
        let cfg = self
            .config
            .model
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no model configuration".into()))?;
        Model::from_params(cfg, self.store("model.")).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn tokenizer<T: Real>(&self) -> Result<TokenizerNet<T>> {
        let cfg = self
            .config
            .tokenizer
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no tokenizer configuration".into()))?;
        TokenizerNet::from_params(cfg, self.store("tok.")).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, v) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || v.shape().len() > u8::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor `{name}` cannot be stored")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(v.shape().len() as u8);
            for &d in v.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("checkpoint version {version}, expected {VERSION}")));
        }
        if fnv1a64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("configuration is not UTF-8".into()))?;
        let config: CheckpointConfig =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("configuration: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Array::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::ScaleSchedule;

    fn sample() -> Checkpoint {
        let model = Model::<f32>::new(ModelConfig::small(ScaleSchedule::toy16()), 3).unwrap();
        let mut ck = Checkpoint::new(CheckpointConfig {
            model: Some(model.cfg.clone()),
            ..CheckpointConfig::default()
        });
        ck.add_store("model.", &model.params);
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let m = back.model::<f32>().unwrap();
        let orig = ck.model::<f32>().unwrap();
        assert!(m.params.bit_equal(&orig.params));
    }

    #[test]
    fn corruption_and_version_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 20]).is_err());
        assert!(Checkpoint::from_bytes(b"hello").is_err());
        assert!(Checkpoint::new(CheckpointConfig::default()).model::<f32>().is_err());
    }
}
