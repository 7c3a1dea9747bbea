//! Single-file checkpoints: magic, version, a JSON header with configs,
//! metas and a tensor manifest, then little-endian `f32` tensor data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::model::{LoraConfig, Model, ModelConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::trainer::CheckpointMeta;

const MAGIC: &[u8; 8] = b"SLLMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: [usize; 2],
    /// Byte offset into the data section.
    pub offset: u64,
    pub train_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub metas: Vec<CheckpointMeta>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model, metas: &[CheckpointMeta]) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    for (name, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            group: p.group,
            shape: [p.value.nrows(), p.value.ncols()],
            offset: data.len() as u64,
            train_only: p.group.train_only(),
        });
        for v in p.value.iter() {
            data.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        lora: model.lora.clone(),
        metas: metas.to_vec(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    Ok((header, &body[hlen..]))
}

/// Rebuilds a model. With `inference_only`, train-only tensors are skipped.
pub fn from_bytes(bytes: &[u8], inference_only: bool) -> Result<(Model, Vec<CheckpointMeta>)> {
    let (header, data) = read_header(bytes)?;
    header.model.validate()?;
    let mut params = ParamStore::new();
    for t in &header.tensors {
        if inference_only && t.train_only {
            continue;
        }
        let n = t.shape[0] * t.shape[1];
        let start = t.offset as usize;
        let end = start + 4 * n;
        if end > data.len() {
            return Err(bad(format!(
                "tensor {} runs past the end of the file",
                t.name
            )));
        }
        let values: Vec<f64> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let value = Tensor::from_shape_vec((t.shape[0], t.shape[1]), values)
            .map_err(|e| bad(e.to_string()))?;
        params.insert(t.name.clone(), t.group, value);
    }
    let reference = Model::new(header.model.clone(), 0)?;
    for (name, p) in reference.params.iter() {
        match params.get(name) {
            Some(q) if q.value.dim() == p.value.dim() => {}
            Some(_) => return Err(bad(format!("tensor {name} has the wrong shape"))),
            None => return Err(bad(format!("tensor {name} missing"))),
        }
    }
    if header.lora.is_some() != params.has_group(ParamGroup::Lora) {
        return Err(bad("LoRA config and LoRA tensors disagree"));
    }
    Ok((
        Model {
            config: header.model,
            lora: header.lora,
            params,
        },
        header.metas,
    ))
}

pub fn save(path: &Path, model: &Model, metas: &[CheckpointMeta]) -> Result<()> {
    std::fs::write(path, to_bytes(model, metas)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, inference_only: bool) -> Result<(Model, Vec<CheckpointMeta>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, inference_only)
}
