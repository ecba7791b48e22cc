//! Model checkpoint files.
//!
//! Layout: the magic line `SWCP1\n`, an 8-byte little-endian header length,
//! a JSON header carrying the seed, the model configuration, and the tensor
//! directory (group, name, shape, in storage order), then every tensor's
//! values as little-endian 32-bit floats, concatenated in directory order.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{param_layout, EncoderError, ModelConfig, ModelParams, ParamEntry, ParamGroup};
use crate::ioutil::atomic_write;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"SWCP1\n";

/// Errors raised while reading or writing checkpoints.
#[derive(Debug)]
pub enum CheckpointError {
    /// Filesystem failure.
    Io { path: PathBuf, source: io::Error },
    /// The file does not start with the checkpoint magic.
    BadMagic { path: PathBuf },
    /// The file ends before its declared content does.
    Truncated { path: PathBuf },
    /// The JSON header is malformed or inconsistent.
    Header { path: PathBuf, detail: String },
    /// The stored tensors do not form a valid parameter set.
    Params(EncoderError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, source } => {
                write!(f, "checkpoint io error at {}: {source}", path.display())
            }
            CheckpointError::BadMagic { path } => {
                write!(f, "{} is not a checkpoint file (bad magic)", path.display())
            }
            CheckpointError::Truncated { path } => {
                write!(f, "checkpoint {} is truncated", path.display())
            }
            CheckpointError::Header { path, detail } => {
                write!(f, "checkpoint {} has a bad header: {detail}", path.display())
            }
            CheckpointError::Params(err) => write!(f, "checkpoint contents invalid: {err}"),
        }
    }
}

impl std::error::Error for CheckpointError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CheckpointError::Io { source, .. } => Some(source),
            CheckpointError::Params(err) => Some(err),
            _ => None,
        }
    }
}

impl From<EncoderError> for CheckpointError {
    fn from(err: EncoderError) -> Self {
        CheckpointError::Params(err)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    seed: u64,
    cfg: ModelConfig,
    tensors: Vec<TensorMeta>,
}

/// Write `params` to `path` atomically.
pub fn save(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let header = Header {
        seed: params.seed(),
        cfg: params.cfg().clone(),
        tensors: params
            .entries()
            .iter()
            .map(|e| TensorMeta {
                group: e.group.as_str().to_owned(),
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).expect("checkpoint header always serializes");

    let data_len: usize = params.entries().iter().map(|e| e.tensor.numel() * 4).sum();
    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + data_len);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for entry in params.entries() {
        for &x in entry.tensor.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    atomic_write(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Read a checkpoint back into a validated parameter set.
pub fn load(path: &Path) -> Result<ModelParams, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.to_owned() });
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(CheckpointError::Truncated { path: path.to_owned() });
    }
    let header_len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < header_len {
        return Err(CheckpointError::Truncated { path: path.to_owned() });
    }
    let header: Header =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| CheckpointError::Header {
            path: path.to_owned(),
            detail: e.to_string(),
        })?;
    let mut data = &rest[header_len..];

    let layout = param_layout(&header.cfg);
    if layout.len() != header.tensors.len() {
        return Err(CheckpointError::Header {
            path: path.to_owned(),
            detail: format!(
                "directory lists {} tensors, config needs {}",
                header.tensors.len(),
                layout.len()
            ),
        });
    }

    let mut entries = Vec::with_capacity(layout.len());
    for (spec, meta) in layout.iter().zip(&header.tensors) {
        let group = ParamGroup::parse(&meta.group).ok_or_else(|| CheckpointError::Header {
            path: path.to_owned(),
            detail: format!("unknown parameter group '{}'", meta.group),
        })?;
        let numel: usize = meta.shape.iter().product();
        if data.len() < numel * 4 {
            return Err(CheckpointError::Truncated { path: path.to_owned() });
        }
        let mut values = Vec::with_capacity(numel);
        for chunk in data[..numel * 4].chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        data = &data[numel * 4..];
        let tensor = Tensor::new(meta.shape.clone(), values).map_err(|e| {
            CheckpointError::Header {
                path: path.to_owned(),
                detail: format!("tensor {}/{}: {e}", meta.group, meta.name),
            }
        })?;
        entries.push(ParamEntry {
            group,
            name: meta.name.clone(),
            tensor,
            fan_in: spec.fan_in,
        });
    }
    if !data.is_empty() {
        return Err(CheckpointError::Header {
            path: path.to_owned(),
            detail: format!("{} trailing bytes after the last tensor", data.len()),
        });
    }
    Ok(ModelParams::from_parts(header.cfg, header.seed, entries)?)
}
