//! Binary checkpoint container shared by every network.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `ULRSEGCK` |
//! | 4     | format version (`u32`) |
//! | 8     | header length `L` (`u64`) |
//! | L     | JSON header: metadata and an index of `{name, shape, offset}` |
//! | rest  | concatenated `f64` arrays |
//!
//! Array names are `section/kind/name`, with sections such as `generator`,
//! `segmenter`, `discriminator` and kinds `param`, `buffer`, `adam_m`, `adam_v`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ulrseg_tensor::{Adam, Module, Tensor};

use crate::error::{io_err, Error, Result};
use crate::FORMAT_VERSION;

pub const MAGIC: &[u8; 8] = b"ULRSEGCK";

pub const GENERATOR: &str = "generator";
pub const SEGMENTER: &str = "segmenter";
pub const DISCRIMINATOR: &str = "discriminator";
pub const DISCRIMINATOR_RGB: &str = "discriminator_rgb";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: u8,
    pub step: usize,
    pub epoch: usize,
    pub val_miou: Option<f64>,
    /// Run configuration echoed verbatim.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    arrays: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(stage: u8, step: usize, epoch: usize, config: serde_json::Value) -> Self {
        Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                stage,
                step,
                epoch,
                val_miou: None,
                config,
            },
            arrays: BTreeMap::new(),
        }
    }

    pub fn has_section(&self, section: &str) -> bool {
        let prefix = format!("{section}/");
        self.arrays.keys().any(|k| k.starts_with(&prefix))
    }

    /// Sections present, in name order.
    pub fn sections(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .arrays
            .keys()
            .filter_map(|k| k.split('/').next().map(str::to_string))
            .collect();
        out.dedup();
        out
    }

    /// Stores parameters and buffers of `m` under `section`.
    pub fn put_module(&mut self, section: &str, m: &dyn Module) {
        for p in m.params() {
            self.arrays
                .insert(format!("{section}/param/{}", p.name), p.value.clone());
        }
        for (name, t) in m.buffers() {
            self.arrays.insert(format!("{section}/buffer/{name}"), t);
        }
    }

    /// Restores every parameter and buffer of `m` from `section`.
    pub fn load_module(&self, section: &str, m: &mut dyn Module) -> Result<()> {
        for p in m.params_mut() {
            let key = format!("{section}/param/{}", p.name);
            let t = self
                .arrays
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        let prefix = format!("{section}/buffer/");
        let names: Vec<String> = m.buffers().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let t = self
                .arrays
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
            if !m.load_buffer(&name, t) {
                return Err(Error::Checkpoint(format!(
                    "buffer {key} rejected by the model"
                )));
            }
        }
        Ok(())
    }

    pub fn put_adam(&mut self, section: &str, opt: &Adam) {
        self.arrays.insert(
            format!("{section}/adam_step/t"),
            Tensor::scalar(opt.steps_taken() as f64),
        );
        for (name, (m, v)) in opt.moments() {
            self.arrays
                .insert(format!("{section}/adam_m/{name}"), m.clone());
            self.arrays
                .insert(format!("{section}/adam_v/{name}"), v.clone());
        }
    }

    /// Restores optimizer moments; absent sections leave `opt` untouched.
    pub fn load_adam(&self, section: &str, opt: &mut Adam) -> bool {
        let Some(step) = self.arrays.get(&format!("{section}/adam_step/t")) else {
            return false;
        };
        let prefix = format!("{section}/adam_m/");
        let mut moments = BTreeMap::new();
        for (k, m) in self.arrays.range(prefix.clone()..) {
            let Some(name) = k.strip_prefix(&prefix) else {
                break;
            };
            if let Some(v) = self.arrays.get(&format!("{section}/adam_v/{name}")) {
                moments.insert(name.to_string(), (m.clone(), v.clone()));
            }
        }
        opt.restore(step.item() as u64, moments);
        true
    }

    /// Copy without discriminators or optimizer state.
    pub fn inference_only(&self) -> Self {
        let arrays = self
            .arrays
            .iter()
            .filter(|(k, _)| {
                let mut parts = k.split('/');
                let section = parts.next().unwrap_or_default();
                let kind = parts.next().unwrap_or_default();
                !section.starts_with(DISCRIMINATOR) && (kind == "param" || kind == "buffer")
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self {
            meta: self.meta.clone(),
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, t)| {
                let e = IndexEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len() as u64 * 8;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body_start])?;
        let body = &bytes[body_start..];
        let mut arrays = BTreeMap::new();
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * 8;
            if end > body.len() {
                return Err(Error::Checkpoint(format!(
                    "array {} runs past the end of the file",
                    e.name
                )));
            }
            let data = body[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(e.name, Tensor::new(&e.shape, data));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ulrseg_tensor::Param;

    struct Two {
        a: Param,
        b: Param,
    }

    impl Module for Two {
        fn params(&self) -> Vec<&Param> {
            vec![&self.a, &self.b]
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.a, &mut self.b]
        }
    }

    #[test]
    fn bytes_round_trip() {
        let m = Two {
            a: Param::new("a", Tensor::new(&[2], vec![1.5, -0.25])),
            b: Param::new("b", Tensor::new(&[1, 2], vec![f64::MIN_POSITIVE, 3.0])),
        };
        let mut ck = Checkpoint::new(2, 7, 1, serde_json::json!({"k": 1}));
        ck.meta.val_miou = Some(0.5);
        ck.put_module("net", &m);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut fresh = Two {
            a: Param::new("a", Tensor::zeros(&[2])),
            b: Param::new("b", Tensor::zeros(&[1, 2])),
        };
        back.load_module("net", &mut fresh).unwrap();
        assert_eq!(fresh.a, m.a);
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
