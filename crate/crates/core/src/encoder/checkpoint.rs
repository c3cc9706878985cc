//! Binary checkpoint: magic, version, JSON manifest, then flat little-endian
//! f64 tensor data in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Mat;
use super::{DualEncoderModel, EncoderConfig, EncoderError};

const MAGIC: &[u8; 8] = b"ATNGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: String,
    pub model: DualEncoderModel,
}

impl Checkpoint {
    pub fn new(phase: &str, model: DualEncoderModel) -> Self {
        Self {
            phase: phase.to_string(),
            model,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    tie_encoders: bool,
    phase: String,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> EncoderError {
    EncoderError::Checkpoint(msg.into())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), EncoderError> {
    let tensors = ckpt.model.named_tensors();
    let header = Header {
        config: ckpt.model.config.clone(),
        tie_encoders: ckpt.model.tie_encoders(),
        phase: ckpt.phase.clone(),
        tensors: tensors
            .iter()
            .map(|(n, m)| TensorEntry {
                name: n.clone(),
                shape: [m.nrows(), m.ncols()],
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::with_capacity(header.len() + 8 * ckpt.model.parameter_count() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in &tensors {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, EncoderError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;

    let mut model = DualEncoderModel::new(header.config.clone(), header.tie_encoders)?;
    let mut offset = 20 + hlen;
    {
        let mut slots = model.named_tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(bad("tensor count does not match config"));
        }
        for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
            if *name != entry.name || [slot.nrows(), slot.ncols()] != entry.shape {
                return Err(bad(format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
            let n = slot.len();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad(format!("truncated data for {name}")))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            **slot = Mat::from_shape_vec(slot.raw_dim(), values).map_err(|e| bad(e.to_string()))?;
            offset += 8 * n;
        }
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        phase: header.phase,
        model,
    })
}
