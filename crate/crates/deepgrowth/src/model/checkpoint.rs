//! Checkpoint container: 8-byte magic "DGROWTH1", a little-endian u64
//! JSON header length, the UTF-8 JSON header (format version, config,
//! tensor manifest with name/shape/dtype/offset), then raw little-endian
//! f64 payloads. Byte-exact across save/load/save.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Adam;
use crate::error::{Error, Result};

use super::{GrowthModel, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGROWTH1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    step_count: u64,
    has_optimizer: bool,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn of(optimizer: &Adam) -> Self {
        let (m, v, step_count) = optimizer.state();
        OptimizerState {
            m: m.to_vec(),
            v: v.to_vec(),
            step_count,
        }
    }

    /// Build an optimizer with these moments and the given hyperparameters.
    pub fn into_adam(self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Adam> {
        let sizes: Vec<usize> = self.m.iter().map(|t| t.len()).collect();
        let mut adam = Adam::new(lr, beta1, beta2, eps, &sizes);
        adam.restore_state(self.m, self.v, self.step_count)?;
        Ok(adam)
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: GrowthModel,
    pub optimizer: Option<OptimizerState>,
}

fn bad(message: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        message: message.into(),
    }
}

fn push_payload(buf: &mut Vec<u8>, values: &[f64]) {
    buf.reserve(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, model: &GrowthModel, optimizer: Option<&Adam>) -> Result<()> {
    let named = model.named_tensors();
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut record = |name: String, shape: Vec<usize>, values: &[f64]| {
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f64".to_string(),
            offset: payload.len() as u64,
        });
        push_payload(&mut payload, values);
    };
    for (name, shape, values) in &named {
        record(name.clone(), shape.clone(), values);
    }
    let mut step_count = 0;
    if let Some(adam) = optimizer {
        let (m, v, steps) = adam.state();
        if m.len() != named.len() {
            return Err(Error::ConfigMismatch(format!(
                "optimizer tracks {} tensors, model has {}",
                m.len(),
                named.len()
            )));
        }
        step_count = steps;
        for (moment, prefix) in [(m, "optim.m."), (v, "optim.v.")] {
            for ((name, shape, _), values) in named.iter().zip(moment) {
                record(format!("{prefix}{name}"), shape.clone(), values);
            }
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        step_count,
        has_optimizer: optimizer.is_some(),
        tensors,
    };
    let header = serde_json::to_vec(&manifest).map_err(|source| Error::Json {
        context: format!("{}", path.display()),
        source,
    })?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_tensor(payload: &[u8], entry: &TensorEntry, len: usize) -> Result<Vec<f64>> {
    if entry.dtype != "f64" {
        return Err(bad(format!("tensor {} has dtype {}", entry.name, entry.dtype)));
    }
    let start = entry.offset as usize;
    let end = start
        .checked_add(len * 8)
        .ok_or_else(|| bad(format!("tensor {} offset overflows", entry.name)))?;
    if end > payload.len() {
        return Err(bad(format!(
            "tensor {} extends past the payload ({} > {})",
            entry.name,
            end,
            payload.len()
        )));
    }
    Ok(payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing DGROWTH1 magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(bad("truncated header"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..16 + header_len]).map_err(|source| Error::Json {
            context: format!("{}", path.display()),
            source,
        })?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint format version {} (expected {})",
            manifest.format_version, CHECKPOINT_VERSION
        )));
    }
    let payload = &bytes[16 + header_len..];

    let mut model = GrowthModel::init(manifest.config.clone(), 0)?;
    let named = model.named_tensors();
    let model_tensor_count = named.len();
    let expected: Vec<(String, Vec<usize>, usize)> = {
        let mut v: Vec<(String, Vec<usize>, usize)> = named
            .iter()
            .map(|(n, s, t)| (n.clone(), s.clone(), t.len()))
            .collect();
        if manifest.has_optimizer {
            for prefix in ["optim.m.", "optim.v."] {
                v.extend(
                    named
                        .iter()
                        .map(|(n, s, t)| (format!("{prefix}{n}"), s.clone(), t.len())),
                );
            }
        }
        v
    };
    if manifest.tensors.len() != expected.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for (entry, (name, shape, len)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::ConfigMismatch(format!(
                "tensor {} {:?} does not match the config's layout ({} {:?})",
                entry.name, entry.shape, name, shape
            )));
        }
        loaded.push(read_tensor(payload, entry, *len)?);
    }
    for ((_, tensor), values) in model
        .named_tensors_mut()
        .into_iter()
        .zip(loaded.iter().take(model_tensor_count))
    {
        tensor.copy_from_slice(values);
    }
    let optimizer = if manifest.has_optimizer {
        let m = loaded[model_tensor_count..2 * model_tensor_count].to_vec();
        let v = loaded[2 * model_tensor_count..].to_vec();
        Some(OptimizerState {
            m,
            v,
            step_count: manifest.step_count,
        })
    } else {
        None
    };
    Ok(Checkpoint { model, optimizer })
}

/// Reject a checkpoint whose stored config differs from what the caller
/// was configured to expect.
pub fn ensure_config(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    if expected != found {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint config {found:?} does not match expected {expected:?}"
        )));
    }
    Ok(())
}
