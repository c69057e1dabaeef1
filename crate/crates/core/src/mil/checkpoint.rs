//! Single-file checkpoint: magic, little-endian `u32` header length, JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{MilConfig, MilModel, MilParams};
use super::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AMILCK01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub embedder: String,
    pub feature_dim: usize,
    pub attention_hidden: usize,
    pub clinical_dim: usize,
    pub n_classes: usize,
    pub clinical_repeat: usize,
    pub tensors: Vec<TensorInfo>,
    /// Free-form metadata such as the fitted clinical encoder.
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointHeader {
    pub fn config(&self) -> MilConfig {
        MilConfig {
            feature_dim: self.feature_dim,
            attention_hidden: self.attention_hidden,
            clinical_dim: self.clinical_dim,
            n_classes: self.n_classes,
            clinical_repeat: self.clinical_repeat,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub embedder: String,
    pub model: MilModel,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(embedder: impl Into<String>, model: MilModel) -> Self {
        Checkpoint {
            embedder: embedder.into(),
            model,
            extra: serde_json::Value::Null,
        }
    }

    pub fn header(&self) -> CheckpointHeader {
        let cfg = self.model.config();
        CheckpointHeader {
            version: CHECKPOINT_VERSION,
            embedder: self.embedder.clone(),
            feature_dim: cfg.feature_dim,
            attention_hidden: cfg.attention_hidden,
            clinical_dim: cfg.clinical_dim,
            n_classes: cfg.n_classes,
            clinical_repeat: cfg.clinical_repeat,
            tensors: MilParams::NAMES
                .iter()
                .zip(MilParams::shapes(cfg))
                .map(|(n, shape)| TensorInfo {
                    name: (*n).to_string(),
                    shape,
                })
                .collect(),
            extra: self.extra.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = serde_json::to_vec(&self.header()).map_err(std::io::Error::other)?;
        let len = u32::try_from(header.len()).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&header)?;
        for t in self.model.params().tensors() {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("malformed checkpoint: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)
            .map_err(|_| bad("truncated header length"))?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)
            .map_err(|_| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| bad(&e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!(
                "version {} (supported: {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let cfg = header.config();
        let expected = MilParams::shapes(&cfg);
        let names_ok = header.tensors.len() == MilParams::NAMES.len()
            && header
                .tensors
                .iter()
                .zip(MilParams::NAMES.iter().zip(&expected))
                .all(|(t, (n, s))| t.name == *n && &t.shape == s);
        if !names_ok {
            return Err(bad("tensor table does not match the model dimensions"));
        }
        let mut params = MilParams::zeros(&cfg);
        for t in params.tensors_mut() {
            let mut buf = vec![0u8; t.len() * 8];
            r.read_exact(&mut buf)
                .map_err(|_| bad("truncated tensor data"))?;
            for (v, chunk) in t.iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        Ok(Checkpoint {
            embedder: header.embedder,
            model: MilModel::from_parts(cfg, params)?,
            extra: header.extra,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
