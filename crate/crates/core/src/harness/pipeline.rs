//! Cascade baseline: transcribe with an ASR model, then classify the text
//! with a bag-of-word-embeddings model trained from scratch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Label, Utterance};
use crate::decode::{ctc_greedy, macro_f1};
use crate::error::{Error, Result};
use crate::intent::{decode_intent, encode_intent, IntentSchema};
use crate::layers::{Binder, Linear, ParamId, ParamStore, Scope};
use crate::losses::{multihot_bce, smoothed_ce};
use crate::model::{Model, Task};
use crate::numerics::{Tape, Tensor};
use crate::tokenizer::{Vocab, BLANK};
use crate::training::Adam;

/// Which ASR output feeds the text classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptSource {
    Ctc,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub source: TranscriptSource,
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub max_decode_len: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            source: TranscriptSource::Ctc,
            embed_dim: 32,
            epochs: 200,
            lr: 0.02,
            max_decode_len: 48,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.epochs == 0 || self.max_decode_len == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(
                "harness.pipeline needs positive embed_dim, epochs, lr and max_decode_len".into(),
            ));
        }
        Ok(())
    }
}

/// Transcribes every utterance with `model`.
pub fn transcribe(model: &Model<f32>, utts: &[&Utterance], vocab: &Vocab, cfg: &PipelineConfig) -> Result<Vec<String>> {
    utts.iter()
        .map(|u| {
            let item = model.encode_item(&u.features)?;
            let tokens = match cfg.source {
                TranscriptSource::Ctc => ctc_greedy(&item.ctc_log_probs, BLANK)?,
                TranscriptSource::Attention => model.greedy(&item, cfg.max_decode_len)?,
            };
            Ok(vocab.decode(&tokens))
        })
        .collect()
}

/// Mean of word embeddings followed by a linear layer. Word id 0 stands
/// for every word not seen in training.
#[derive(Clone, Debug)]
pub struct TextClassifier {
    words: BTreeMap<String, usize>,
    store: ParamStore<f32>,
    embed: ParamId,
    out: Linear,
    task: Task,
}

enum Targets {
    Bits(Vec<u8>),
    Classes(Vec<usize>),
}

impl TextClassifier {
    pub fn train(texts: &[String], labels: &[Label], task: &Task, cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if texts.is_empty() || texts.len() != labels.len() {
            return Err(Error::Data(format!(
                "text classifier needs matching non-empty texts and labels, got {} and {}",
                texts.len(),
                labels.len()
            )));
        }
        let mut words = BTreeMap::new();
        for w in texts.iter().flat_map(|t| t.split_whitespace()) {
            words.entry(w.to_string()).or_insert(0);
        }
        for (i, id) in words.values_mut().enumerate() {
            *id = i + 1;
        }
        let n_out = match task {
            Task::Intent(schema) => schema.total_bits(),
            Task::Sentiment { n_classes } => *n_classes,
        };
        let mut store = ParamStore::new();
        let (embed, out) = {
            let mut root = Scope::root(&mut store, seed);
            let embed = root.uniform("embed", &[words.len() + 1, cfg.embed_dim], 0.5)?;
            (embed, Linear::new(&mut root.sub("out"), cfg.embed_dim, n_out)?)
        };
        let mut model = Self {
            words,
            store,
            embed,
            out,
            task: task.clone(),
        };
        let targets = match task {
            Task::Intent(schema) => {
                let mut bits = Vec::new();
                for label in labels {
                    let Label::Intent(intent) = label else {
                        return Err(Error::Data("pipeline training needs intent labels".into()));
                    };
                    bits.extend(encode_intent(schema, intent)?.bits);
                }
                Targets::Bits(bits)
            }
            Task::Sentiment { n_classes } => Targets::Classes(
                labels
                    .iter()
                    .map(|l| match l {
                        Label::Sentiment(c) if c < n_classes => Ok(*c),
                        _ => Err(Error::Data("pipeline training needs sentiment labels".into())),
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let bags = model.bags(texts);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..cfg.epochs {
            let grads = {
                let tape = Tape::new();
                let b = Binder::new(&tape, &model.store);
                let logits = model.logits(&b, &bags)?;
                let loss = match &targets {
                    Targets::Bits(bits) => multihot_bce(&logits, bits)?,
                    Targets::Classes(classes) => smoothed_ce(&logits, classes, 0.0, None)?,
                };
                b.collect(loss.backward()?)
            };
            adam.step(&mut model.store, &grads, cfg.lr, None)?;
        }
        Ok(model)
    }

    /// Row-normalised word counts, `[n, vocabulary]`.
    fn bags(&self, texts: &[String]) -> Tensor<f32> {
        let width = self.words.len() + 1;
        let mut data = vec![0f32; texts.len() * width];
        for (row, text) in texts.iter().enumerate() {
            let ids: Vec<usize> = text
                .split_whitespace()
                .map(|w| self.words.get(w).copied().unwrap_or(0))
                .collect();
            let ids = if ids.is_empty() { vec![0] } else { ids };
            for &id in &ids {
                data[row * width + id] += 1.0 / ids.len() as f32;
            }
        }
        Tensor::from_parts(vec![texts.len(), width], data)
    }

    fn logits<'t>(&self, b: &Binder<'t, '_, f32>, bags: &Tensor<f32>) -> Result<crate::numerics::Var<'t, f32>> {
        let pooled = b.constant(bags.clone()).matmul(&b.param(self.embed))?;
        self.out.forward(b, &pooled)
    }

    /// Predicted class index per text.
    pub fn predict(&self, texts: &[String]) -> Result<Vec<usize>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let b = Binder::inference(&tape, &self.store);
        let logits = self.logits(&b, &self.bags(texts))?;
        let width = logits.shape()[1];
        logits
            .value()
            .data()
            .chunks_exact(width)
            .map(|row| match &self.task {
                Task::Intent(schema) => Ok(schema.class_of(&decode_intent(schema, row)?)),
                Task::Sentiment { .. } => {
                    let row: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
                    Ok(crate::model::argmax(&row))
                }
            })
            .collect()
    }
}

/// Intent accuracy or sentiment macro-F1 from class predictions.
pub fn class_metric(task: &Task, preds: &[usize], golds: &[usize]) -> Result<(String, f64)> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::shape("class_metric", &[preds.len()], &[golds.len()]));
    }
    match task {
        Task::Intent(_) => {
            let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
            Ok(("accuracy".into(), correct as f64 / preds.len() as f64))
        }
        Task::Sentiment { n_classes } => Ok(("macro_f1".into(), macro_f1(preds, golds, *n_classes)?.macro_f1)),
    }
}

pub(crate) fn schema_of(task: &Task) -> Option<&IntentSchema> {
    match task {
        Task::Intent(s) => Some(s),
        Task::Sentiment { .. } => None,
    }
}
