//! Versioned binary container for a trained model.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (configuration, epoch, loss curve, tensor names and shapes), then
//! every parameter followed by every batch-norm buffer as little-endian
//! `f64`. Values round-trip bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Crvae, LossBreakdown, ModelConfig, ModelError};
use crate::nn::Module;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRVAECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Crvae,
    /// Number of completed epochs.
    pub epoch: usize,
    pub loss_curve: Vec<LossBreakdown>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    loss_curve: Vec<LossBreakdown>,
    params: Vec<TensorInfo>,
    buffers: Vec<TensorInfo>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut params = Vec::new();
        let mut blob = Vec::new();
        self.model.visit_params(&mut |p| {
            params.push(TensorInfo { name: p.name.clone(), shape: p.shape.clone() });
            blob.extend(p.value.iter().flat_map(|v| v.to_le_bytes()));
        });
        let mut buffers = Vec::new();
        self.model.visit_buffers(&mut |b| {
            buffers.push(TensorInfo { name: b.name.clone(), shape: vec![b.value.len()] });
            blob.extend(b.value.iter().flat_map(|v| v.to_le_bytes()));
        });
        let header = Header {
            config: self.model.config().clone(),
            epoch: self.epoch,
            loss_curve: self.loss_curve.clone(),
            params,
            buffers,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let fmt = |m: &str| ModelError::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(fmt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| ModelError::Format(format!("bad header: {e}")))?;
        let mut blob = body[hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        if !(body.len() - hlen).is_multiple_of(8) {
            return Err(fmt("parameter blob is not a whole number of f64 values"));
        }
        let mut model = Crvae::new(header.config)?;
        let mut problem: Option<String> = None;
        let mut idx = 0;
        model.visit_params_mut(&mut |p| {
            match header.params.get(idx) {
                Some(info) if info.name == p.name && info.shape == p.shape => {
                    for v in &mut p.value {
                        match blob.next() {
                            Some(x) => *v = x,
                            None => problem = Some("parameter blob too short".into()),
                        }
                    }
                }
                _ => problem = Some(format!("tensor {} does not match the header", p.name)),
            }
            idx += 1;
        });
        if idx != header.params.len() {
            problem.get_or_insert_with(|| "parameter count differs from header".into());
        }
        let mut bidx = 0;
        model.visit_buffers_mut(&mut |b| {
            match header.buffers.get(bidx) {
                Some(info) if info.name == b.name && info.shape == [b.value.len()] => {
                    for v in &mut b.value {
                        match blob.next() {
                            Some(x) => *v = x,
                            None => problem = Some("buffer blob too short".into()),
                        }
                    }
                }
                _ => problem = Some(format!("buffer {} does not match the header", b.name)),
            }
            bidx += 1;
        });
        if blob.next().is_some() {
            problem.get_or_insert_with(|| "trailing bytes after parameter blob".into());
        }
        if let Some(p) = problem {
            return Err(ModelError::Format(p));
        }
        Ok(Self { model, epoch: header.epoch, loss_curve: header.loss_curve })
    }

    /// Writes atomically via a temporary file in the target directory.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.persist(path).map_err(|e| ModelError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
