//! Checkpoint file.
//!
//! Layout (little-endian): `"SEMC"`, version `u32`, config blob (`u32` byte
//! length + `key=value` text), tensor count `u32`, then per tensor: name
//! length `u32` + UTF-8 bytes, rank `u32`, extents `u64 × rank`, `f32` data.
//! Raw parameters carry bare names; auxiliary sets live under namespaces such
//! as `ema/`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Denoiser, DenoiserConfig, Params};
use crate::binio::{BinRead, BinWrite};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SEMC";
const VERSION: u32 = 1;

pub const EMA: &str = "ema";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config: KeyValues,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_denoiser(model: &Denoiser) -> Self {
        let mut ck = Self {
            config: model.cfg.to_kv(),
            tensors: BTreeMap::new(),
        };
        ck.insert_params("", &model.params);
        ck
    }

    /// Adds `params` under `namespace/` (or bare names for `""`).
    pub fn insert_params(&mut self, namespace: &str, params: &Params) {
        for (name, t) in params.iter() {
            let key = if namespace.is_empty() {
                name.to_string()
            } else {
                format!("{namespace}/{name}")
            };
            self.tensors.insert(key, t.clone());
        }
    }

    pub fn has_namespace(&self, namespace: &str) -> bool {
        let p = format!("{namespace}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    pub fn params(&self, namespace: &str) -> Params {
        let map = self
            .tensors
            .iter()
            .filter_map(|(k, v)| {
                let name = if namespace.is_empty() {
                    (!k.contains('/')).then_some(k.as_str())
                } else {
                    k.strip_prefix(namespace).and_then(|r| r.strip_prefix('/'))
                };
                name.map(|n| (n.to_string(), v.clone()))
            })
            .collect();
        Params::from_map(map)
    }

    pub fn model_config(&self) -> Result<DenoiserConfig> {
        DenoiserConfig::default().updated_from(&self.config)
    }

    /// Rebuilds the denoiser from raw (`ema = false`) or EMA parameters.
    pub fn denoiser(&self, ema: bool) -> Result<Denoiser> {
        let cfg = self.model_config()?;
        let params = self.params(if ema { EMA } else { "" });
        let reference = Params::init(&cfg, 0)?;
        reference.check_same_layout(&params).map_err(|e| {
            Error::Format(format!("checkpoint parameters do not match config: {e}"))
        })?;
        Ok(Denoiser { cfg, params })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.put_u32(VERSION)?;
        let blob = self.config.to_text();
        w.put_u32(blob.len() as u32)?;
        w.write_all(blob.as_bytes())?;
        w.put_u32(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.put_u32(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.put_u32(t.rank() as u32)?;
            for &e in t.shape() {
                w.put_u64(e as u64)?;
            }
            w.put_f32s(t.data())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        let version = r.get_u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let text = read_string(r)?;
        let config = KeyValues::parse(&text).map_err(|e| Error::Format(e.to_string()))?;
        let n = r.get_u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name = read_string(r)?;
            let rank = r.get_u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| Ok(r.get_u64()? as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.get_f32s(shape.iter().product())?;
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
            tensors.insert(name, t);
        }
        Ok(Self { config, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never clobbers the last good file
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = r.get_u32()? as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("string of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("file truncated".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
}
