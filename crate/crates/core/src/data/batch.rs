use super::manifest::{Label, Utterance};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tokenizer::Vocab;

/// Utterances padded to a common length.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, T_max, n_mels]`, zero beyond each item's length.
    pub features: Tensor<f32>,
    pub feat_lengths: Vec<usize>,
    /// `[B · T_max]`, `true` on padded frames.
    pub padding_mask: Vec<bool>,
    /// Transcript token ids (no specials); decoder targets are padded
    /// from these by the model.
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn batch(utterances: &[&Utterance], vocab: &Vocab) -> Result<Batch> {
    let first = utterances
        .first()
        .ok_or_else(|| Error::contract("cannot batch zero utterances"))?;
    let mels = first.features.shape()[1];
    if let Some(u) = utterances.iter().find(|u| u.features.shape()[1] != mels) {
        return Err(Error::Data(format!(
            "utterance {} has {} feature bins, expected {mels}",
            u.id,
            u.features.shape()[1]
        )));
    }
    let feat_lengths: Vec<usize> = utterances.iter().map(|u| u.features.shape()[0]).collect();
    let width = *feat_lengths.iter().max().expect("nonempty");
    let mut data = Vec::with_capacity(utterances.len() * width * mels);
    let mut padding_mask = Vec::with_capacity(utterances.len() * width);
    for (u, &len) in utterances.iter().zip(&feat_lengths) {
        data.extend_from_slice(u.features.data());
        data.resize(data.len() + (width - len) * mels, 0.0);
        padding_mask.extend((0..width).map(|t| t >= len));
    }
    Ok(Batch {
        ids: utterances.iter().map(|u| u.id.clone()).collect(),
        features: Tensor::new(&[utterances.len(), width, mels], data)?,
        feat_lengths,
        padding_mask,
        tokens: utterances.iter().map(|u| vocab.encode(&u.transcript)).collect(),
        labels: utterances.iter().map(|u| u.label.clone()).collect(),
    })
}
