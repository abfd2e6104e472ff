//! Single-file model checkpoints.
//!
//! Layout: the 6-byte magic `ACZSL1`, a little-endian `u64` metadata length,
//! that many bytes of JSON metadata, then every tensor listed in the
//! metadata as raw little-endian `f64` values in listed order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AczslModel, ModelConfig};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"ACZSL1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    num_tasks: usize,
    task_classes: Vec<Vec<usize>>,
    task_active: bool,
    /// Caller-supplied context, e.g. the experiment configuration.
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Serializes `model` with an arbitrary JSON `extra` echoed into the header.
pub fn to_bytes(model: &AczslModel, extra: serde_json::Value) -> Result<Vec<u8>> {
    let tensors = model
        .store
        .iter()
        .map(|(id, name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            frozen: model.store.is_frozen(id),
        })
        .collect();
    let meta = Metadata {
        model: model.config.clone(),
        num_tasks: model.num_tasks(),
        task_classes: model.task_classes().to_vec(),
        task_active: model.is_task_active(),
        extra,
        tensors,
    };
    let header = serde_json::to_vec(&meta)?;
    let payload: usize = model.store.iter().map(|(_, _, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, t) in model.store.iter() {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuilds a model from checkpoint bytes. Returns the model and the `extra`
/// document stored with it.
pub fn from_bytes(bytes: &[u8]) -> Result<(AczslModel, serde_json::Value)> {
    let mut cursor = bytes;
    let mut magic = [0u8; 6];
    read_exact(&mut cursor, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    read_exact(&mut cursor, &mut len)?;
    let len =
        usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Checkpoint("metadata length overflows".into()))?;
    if len > cursor.len() {
        return Err(Error::Checkpoint("truncated metadata".into()));
    }
    let (header, mut payload) = cursor.split_at(len);
    let meta: Metadata = serde_json::from_slice(header)?;
    if meta.task_classes.len() != meta.num_tasks {
        return Err(Error::Checkpoint("task count disagrees with task class lists".into()));
    }

    // Structure comes from replaying task growth; values are then overwritten.
    let mut rng = RngStream::new(0);
    let mut model = AczslModel::new(meta.model.clone(), &mut rng)?;
    for (t, classes) in meta.task_classes.iter().enumerate() {
        model.add_task(classes, &mut rng)?;
        if t + 1 < meta.num_tasks || !meta.task_active {
            model.finish_task()?;
        }
    }
    if meta.tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint lists {} tensors, model has {}",
            meta.tensors.len(),
            model.store.len()
        )));
    }
    for entry in &meta.tensors {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        if model.store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!("shape mismatch for {}", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            read_exact(&mut payload, &mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        *model.store.get_mut(id) = Tensor::new(entry.shape.clone(), values)?;
        if entry.frozen {
            model.store.freeze(id);
        }
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", payload.len())));
    }
    Ok((model, meta.extra))
}

fn read_exact(src: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    src.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

pub fn save(model: &AczslModel, extra: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, extra)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(AczslModel, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
