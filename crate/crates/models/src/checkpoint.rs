//! Versioned single-file checkpoints.
//!
//! A checkpoint is a safetensors file whose header metadata holds one entry,
//! `egomotion`, with a JSON object `{"version", "kind", "config"}`. Every
//! tensor (weights, codebooks, normalisation statistics) is stored by name.
//! Files written by [`Checkpoint::save_hashed`] are named after the SHA-256 of
//! their bytes, so identical content always maps to the same path.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView, View};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "egomotion";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(t: &Tensor) -> Result<Raw> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect()),
        DType::U32 => (Dtype::U32, flat.to_vec1::<u32>()?.iter().flat_map(|x| x.to_le_bytes()).collect()),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
    };
    Ok(Raw { dtype, shape, bytes })
}

fn from_view(v: &TensorView<'_>, dev: &Device) -> Result<Tensor> {
    let shape = v.shape().to_vec();
    let data = v.data();
    let t = match v.dtype() {
        Dtype::F32 => {
            let xs: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(xs, shape, dev)?
        }
        Dtype::F64 => {
            let xs: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(xs, shape, dev)?
        }
        Dtype::U32 => {
            let xs: Vec<u32> = data.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(xs, shape, dev)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn new(kind: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self { kind: kind.to_string(), config: serde_json::to_value(config)?, tensors: BTreeMap::new() })
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), t.clone());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("{} checkpoint lacks {name}", self.kind)))
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header { version: CHECKPOINT_VERSION, kind: self.kind.clone(), config: self.config.clone() };
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);
        let raws: Vec<(String, Raw)> =
            self.tensors.iter().map(|(k, t)| Ok((k.clone(), to_raw(t)?))).collect::<Result<_>>()?;
        Ok(safetensors::serialize(raws.iter().map(|(k, r)| (k.as_str(), r)), Some(meta))?)
    }

    pub fn from_bytes(bytes: &[u8], dev: &Device) -> Result<Self> {
        let st = safetensors::SafeTensors::deserialize(bytes)?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)?;
        let raw = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing egomotion header".into()))?;
        let header: Header = serde_json::from_str(raw)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", header.version)));
        }
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, from_view(&view, dev)?);
        }
        Ok(Self { kind: header.kind, config: header.config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Writes `<dir>/<kind>-<hash>.safetensors` and returns the path.
    pub fn save_hashed(&self, dir: &Path) -> Result<PathBuf> {
        let bytes = self.to_bytes()?;
        let path = dir.join(format!("{}-{}.safetensors", self.kind, &content_hash(&bytes)[..16]));
        std::fs::create_dir_all(dir)?;
        std::fs::write(&path, bytes)?;
        Ok(path)
    }

    pub fn load(path: &Path, dev: &Device) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, dev)
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
