//! Binary checkpoints: magic `MTSL`, `u32` version, `u32` tensor count,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` dtype
//! (0 = f32), a `u8` rank, `u32` dims and little-endian data. A trailing
//! CRC32 covers every preceding byte. Run metadata lives in a JSON file
//! beside the checkpoint (`<path>.json`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Real, Tensor};

const MAGIC: &[u8; 4] = b"MTSL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    pub config_hash: String,
    pub stage: String,
    pub epoch: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: Option<CheckpointMeta>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let params = model.params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::contract(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(0);
        out.push(value.rank() as u8);
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let corrupt = |m: &str| Error::Corrupt(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic or too short)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(corrupt("checksum mismatch (truncated or damaged file)"));
    }
    let mut at = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body
            .get(at..at + n)
            .ok_or_else(|| corrupt("unexpected end of checkpoint"))?;
        at += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let header = take(2)?;
        let (dtype, rank) = (header[0], header[1] as usize);
        if dtype != 0 {
            return Err(corrupt(&format!("tensor {name} has unknown dtype {dtype}")));
        }
        let shape = (0..rank)
            .map(|_| take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(&shape, data).map_err(|e| corrupt(&e.to_string()))?));
    }
    if at != body.len() {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    Ok(tensors)
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, meta: &CheckpointMeta) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    std::fs::write(meta_path(path), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

/// Reads the tensors and, when present, the metadata file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Corrupt(format!("cannot read {}: {e}", path.display())))?;
    let tensors = decode_checkpoint(&bytes)?;
    let meta_file = meta_path(path);
    let meta = if meta_file.exists() {
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&meta_file)?)
            .map_err(|e| Error::Corrupt(format!("{}: {e}", meta_file.display())))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Version(meta.format_version));
        }
        Some(meta)
    } else {
        None
    };
    Ok(Checkpoint { tensors, meta })
}

/// Copies checkpoint tensors into `model`. Every model parameter outside
/// `skip_prefix` must be present with the same shape, and (when `strict`)
/// every checkpoint tensor outside `skip_prefix` must exist in the model.
/// Nothing is modified unless all checks pass.
pub fn apply_checkpoint<T: Real>(
    model: &mut Model<T>,
    tensors: &[(String, Tensor<f32>)],
    skip_prefix: Option<&str>,
    strict: bool,
) -> Result<()> {
    let skipped = |name: &str| skip_prefix.is_some_and(|p| name.starts_with(p));
    let store = model.params();
    let mut problems = Vec::new();
    let mut updates = Vec::new();
    for id in store.ids() {
        let name = store.name(id);
        if skipped(name) {
            continue;
        }
        match tensors.iter().find(|(n, _)| n == name) {
            None => problems.push(format!("{name}: missing from checkpoint")),
            Some((_, t)) if t.shape() != store.get(id).shape() => problems.push(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                t.shape(),
                store.get(id).shape()
            )),
            Some((_, t)) => updates.push((id, t.cast::<T>())),
        }
    }
    if strict {
        for (name, _) in tensors {
            if !skipped(name) && store.lookup(name).is_none() {
                problems.push(format!("{name}: unknown to the model"));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Incompatible(problems.join("; ")));
    }
    let store = model.params_mut();
    for (id, value) in updates {
        store.set(id, value)?;
    }
    Ok(())
}

/// Rebuilds a model from a checkpoint with metadata.
pub fn model_from_checkpoint<T: Real>(checkpoint: &Checkpoint) -> Result<Model<T>> {
    let meta = checkpoint
        .meta
        .as_ref()
        .ok_or_else(|| Error::Corrupt("checkpoint metadata file is missing".into()))?;
    let mut model = Model::new(meta.model.clone(), meta.seed)?;
    apply_checkpoint(&mut model, &checkpoint.tensors, None, true)?;
    Ok(model)
}
