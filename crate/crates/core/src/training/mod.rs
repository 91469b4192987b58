//! Optimisation, pretraining and multitask finetuning, checkpoints.

mod checkpoint;
mod optim;
mod trainer;

pub use checkpoint::{
    apply_checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, meta_path, model_from_checkpoint,
    save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION,
};
pub use optim::{Adam, LrSchedule};
pub use trainer::{finetune_model, finetune_mtl, pretrain_asr, LogRow, TrainConfig, TrainLog, TrainOutcome};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Hex SHA-256 of a value's JSON serialisation.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(value)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests;
