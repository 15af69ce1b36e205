//! Binary checkpoint format.
//!
//! Layout: the magic `BDLM`, a little-endian `u32` format version, a
//! little-endian `u64` header length, that many bytes of UTF-8 JSON header,
//! then every tensor's values as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use bdlm_core::model::{DenoiserParams, ModelConfig};
use bdlm_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"BDLM";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: expected magic BDLM, found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (this build reads version {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: {what} needs {needed} bytes, {available} available")]
    Truncated { what: &'static str, needed: u64, available: u64 },
    #[error("{extra} trailing bytes after the last tensor")]
    Trailing { extra: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint tensors do not match the model: {0}")]
    Shape(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Model hyperparameters as stored in the header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub rope_base: f64,
}

impl From<ModelConfig> for ModelHeader {
    fn from(c: ModelConfig) -> Self {
        ModelHeader {
            vocab: c.vocab,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_len: c.max_len,
            rope_base: c.rope_base,
        }
    }
}

impl From<ModelHeader> for ModelConfig {
    fn from(h: ModelHeader) -> Self {
        ModelConfig {
            vocab: h.vocab,
            d_model: h.d_model,
            n_layers: h.n_layers,
            n_heads: h.n_heads,
            d_ff: h.d_ff,
            max_len: h.max_len,
            rope_base: h.rope_base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Training provenance carried alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub step: usize,
    pub phase: String,
    pub block_size: usize,
    /// Validation negative ELBO in nats per token, when measured.
    pub validation_elbo: Option<f64>,
    /// Learning rate of the last update that produced these weights.
    #[serde(default)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelHeader,
    info: CheckpointInfo,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: DenoiserParams<f32>,
    pub info: CheckpointInfo,
}

impl Checkpoint {
    pub fn new(params: DenoiserParams<f32>, info: CheckpointInfo) -> Self {
        Checkpoint { params, info }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: (*self.params.config()).into(),
            info: self.info.clone(),
            tensors: self
                .params
                .tensors()
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.params.num_params());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic").map_err(|_| CheckpointError::BadMagic { found: bytes.to_vec() })?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic.to_vec() });
        }
        let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let len = u64::from_le_bytes(cur.take(8, "header length")?.try_into().expect("8 bytes"));
        let json = cur.take_u64(len, "header")?;
        let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let config: ModelConfig = header.model.into();
        config.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let bytes_needed = entry
                .shape
                .iter()
                .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| CheckpointError::Header(format!("tensor `{}` is too large", entry.name)))?;
            let raw = cur.take_u64(bytes_needed, "tensor data")?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(&entry.shape, data).map_err(|e| CheckpointError::Shape(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        if cur.pos != bytes.len() {
            return Err(CheckpointError::Trailing {
                extra: bytes.len() - cur.pos,
            });
        }
        let params = DenoiserParams::from_tensors(config, tensors).map_err(|e| CheckpointError::Shape(e.to_string()))?;
        Ok(Checkpoint {
            params,
            info: header.info,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        self.take_u64(n as u64, what)
    }

    fn take_u64(&mut self, n: u64, what: &'static str) -> Result<&'a [u8]> {
        let available = (self.bytes.len() - self.pos) as u64;
        if n > available {
            return Err(CheckpointError::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }
}
