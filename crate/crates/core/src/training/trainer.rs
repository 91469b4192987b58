use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::checkpoint::{apply_checkpoint, Checkpoint};
use super::optim::{Adam, LrSchedule};
use crate::data::{batch, Manifest, Utterance};
use crate::decode::{evaluate_encoded, EvalOptions};
use crate::error::{Error, Result};
use crate::layers::Binder;
use crate::losses::{joint_loss, LossBreakdown, LossWeights};
use crate::model::{EncodedItem, ForwardOutput, Model, ModelConfig, Task, SLU_PREFIX};
use crate::numerics::rng::Rng;
use crate::numerics::{Real, Tape};
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub freeze_encoder: bool,
    pub weights: LossWeights,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Decoding used for validation.
    pub eval: EvalOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            schedule: LrSchedule::Constant,
            betas: [0.9, 0.98],
            adam_eps: 1e-9,
            batch_size: 8,
            max_epochs: 30,
            patience: 10,
            freeze_encoder: true,
            weights: LossWeights::default(),
            seed: 0,
            grad_clip: 5.0,
            eval: EvalOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.patience < 1 || self.batch_size < 1 || self.max_epochs < 1 {
            return fail("train.patience, batch_size and max_epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.betas[0]) || !(0.0..1.0).contains(&self.betas[1]) || self.adam_eps <= 0.0 {
            return fail(format!("bad Adam settings {:?} / {}", self.betas, self.adam_eps));
        }
        if self.grad_clip < 0.0 {
            return fail("train.grad_clip must be non-negative".into());
        }
        if let LrSchedule::Noam { warmup_steps: 0 } = self.schedule {
            return fail("noam warmup_steps must be positive".into());
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    /// Filled on the last step of an epoch that ran validation.
    pub val_metric: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("step,epoch,total,ctc,ce,slu,lr,grad_norm,val_metric,val_loss\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.loss.total,
                r.loss.ctc,
                r.loss.ce,
                opt(r.loss.slu),
                r.lr,
                r.grad_norm,
                opt(r.val_metric),
                opt(r.val_loss)
            );
        }
        out
    }

    /// Mean total loss per epoch, in epoch order.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for r in &self.rows {
            if sums.len() <= r.epoch {
                sums.resize(r.epoch + 1, (0.0, 0));
            }
            sums[r.epoch].0 += r.loss.total;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real = f32> {
    /// Parameters from the selected epoch.
    pub model: Model<T>,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_metric: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub epochs_run: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Selection {
    /// Lowest validation loss.
    Loss,
    /// Highest SLU metric, ties to the lower validation loss.
    SluMetric,
}

/// Trains encoder and ASR head on the hybrid ASR loss alone and keeps the
/// epoch with the lowest validation loss (the last epoch without `val`).
pub fn pretrain_asr<T: Real>(
    config: ModelConfig,
    train: &TrainConfig,
    data: &Manifest,
    val: Option<&Manifest>,
    vocab: &Vocab,
) -> Result<TrainOutcome<T>> {
    let mut model = Model::new(config, train.seed)?;
    model.set_encoder_trainable(true);
    let cfg = TrainConfig {
        weights: train.weights.asr_only(),
        freeze_encoder: false,
        ..train.clone()
    };
    fit(model, &cfg, data, val, vocab, Selection::Loss)
}

/// Initialises encoder and ASR head from `checkpoint`, draws a fresh SLU
/// head, and trains on the joint loss with model selection on the
/// validation SLU metric.
pub fn finetune_mtl<T: Real>(
    config: ModelConfig,
    train: &TrainConfig,
    checkpoint: &Checkpoint,
    data: &Manifest,
    val: Option<&Manifest>,
    vocab: &Vocab,
) -> Result<TrainOutcome<T>> {
    let mut model = Model::new(config, train.seed)?;
    apply_checkpoint(&mut model, &checkpoint.tensors, Some(SLU_PREFIX), false)?;
    finetune_model(model, train, data, val, vocab)
}

/// [`finetune_mtl`] for an already initialised model.
pub fn finetune_model<T: Real>(
    mut model: Model<T>,
    train: &TrainConfig,
    data: &Manifest,
    val: Option<&Manifest>,
    vocab: &Vocab,
) -> Result<TrainOutcome<T>> {
    model.set_encoder_trainable(!train.freeze_encoder);
    fit(model, train, data, val, vocab, Selection::SluMetric)
}

type Selected<T> = (Model<T>, usize, Option<f64>, Option<f64>);

fn schema_of(model: &ModelConfig) -> Option<&crate::intent::IntentSchema> {
    match &model.task {
        Task::Intent(s) => Some(s),
        Task::Sentiment { .. } => None,
    }
}

/// Teacher-forced forward for a slice of utterances, from cached encoder
/// states when available.
fn forward_batch<'t, T: Real>(
    model: &Model<T>,
    b: &Binder<'t, '_, T>,
    utts: &[&Utterance],
    cached: Option<Vec<&EncodedItem<T>>>,
    vocab: &Vocab,
) -> Result<(ForwardOutput<'t, T>, crate::data::Batch)> {
    let batch = batch(utts, vocab)?;
    let out = match cached {
        Some(items) => {
            let enc = model.batch_encoded(b, &items)?;
            model.forward_from_encoded(b, &enc, &batch.tokens)?
        }
        None => model.forward_train(b, &batch.features.cast(), &batch.feat_lengths, &batch.tokens)?,
    };
    Ok((out, batch))
}

fn mean_loss<T: Real>(
    model: &Model<T>,
    utts: &[&Utterance],
    items: &[EncodedItem<T>],
    cfg: &TrainConfig,
    vocab: &Vocab,
) -> Result<f64> {
    let schema = schema_of(model.config());
    let mut total = 0.0;
    for (chunk, item_chunk) in utts.chunks(cfg.batch_size).zip(items.chunks(cfg.batch_size)) {
        let tape = Tape::new();
        let b = Binder::inference(&tape, model.params());
        let (out, batch) = forward_batch(model, &b, chunk, Some(item_chunk.iter().collect()), vocab)?;
        let (_, parts) = joint_loss(&out, &batch.tokens, &batch.labels, schema, &cfg.weights)?;
        total += parts.total * chunk.len() as f64;
    }
    Ok(total / utts.len() as f64)
}

fn fit<T: Real>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    data: &Manifest,
    val: Option<&Manifest>,
    vocab: &Vocab,
    selection: Selection,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training manifest is empty".into()));
    }
    let train_utts: Vec<&Utterance> = data.utterances.iter().collect();
    let val_utts: Vec<&Utterance> = val.map(|v| v.utterances.iter().collect()).unwrap_or_default();
    let frozen = cfg.freeze_encoder;
    let encode_all = |model: &Model<T>, utts: &[&Utterance]| {
        utts.iter()
            .map(|u| model.encode_item(&u.features.cast()))
            .collect::<Result<Vec<_>>>()
    };
    // A frozen encoder never changes, so its outputs are computed once.
    let train_cache = if frozen {
        Some(encode_all(&model, &train_utts)?)
    } else {
        None
    };
    let mut val_cache = if frozen {
        Some(encode_all(&model, &val_utts)?)
    } else {
        None
    };

    let schema = schema_of(model.config()).cloned();
    let mut adam = Adam::new(cfg.betas[0], cfg.betas[1], cfg.adam_eps);
    let order_rng = Rng::stream(cfg.seed, "epoch-order");
    let mut log = TrainLog::default();
    // (model, epoch, val metric, val loss)
    let mut best: Option<Selected<T>> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..train_utts.len()).collect();
        order_rng.split(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let utts: Vec<&Utterance> = chunk.iter().map(|&i| train_utts[i]).collect();
            let (grads, parts) = {
                let tape = Tape::new();
                let b = Binder::new(&tape, model.params());
                let cached = train_cache.as_ref().map(|c| chunk.iter().map(|&i| &c[i]).collect());
                let (out, batch) = forward_batch(&model, &b, &utts, cached, vocab)?;
                let (loss, parts) = joint_loss(&out, &batch.tokens, &batch.labels, schema.as_ref(), &cfg.weights)?;
                if !parts.total.is_finite() {
                    return Err(Error::State(format!("non-finite loss in epoch {epoch}")));
                }
                let grads = if loss.requires_grad() {
                    b.collect(loss.backward()?)
                } else {
                    vec![None; model.params().len()]
                };
                (grads, parts)
            };
            let lr = cfg.schedule.at(cfg.lr, adam.steps() + 1);
            let clip = (cfg.grad_clip > 0.0).then_some(cfg.grad_clip);
            let grad_norm = adam.step(model.params_mut(), &grads, lr, clip)?;
            log.rows.push(LogRow {
                step: adam.steps(),
                epoch,
                loss: parts,
                lr,
                grad_norm,
                val_metric: None,
                val_loss: None,
            });
        }

        if val_utts.is_empty() {
            continue;
        }
        if !frozen {
            val_cache = Some(encode_all(&model, &val_utts)?);
        }
        let items = val_cache.as_ref().expect("validation cache");
        let val_loss = mean_loss(&model, &val_utts, items, cfg, vocab)?;
        let val_metric = match selection {
            Selection::Loss => None,
            Selection::SluMetric => evaluate_encoded(&model, items, &val_utts, vocab, &cfg.eval)?.slu_metric(),
        };
        if let Some(last) = log.rows.last_mut() {
            last.val_loss = Some(val_loss);
            last.val_metric = val_metric;
        }
        let improved = match &best {
            None => true,
            Some((_, _, best_metric, best_loss)) => {
                let best_loss = best_loss.unwrap_or(f64::INFINITY);
                match (selection, val_metric, best_metric) {
                    (Selection::SluMetric, Some(m), Some(bm)) => m > *bm || (m == *bm && val_loss < best_loss),
                    _ => val_loss < best_loss,
                }
            }
        };
        if improved {
            best = Some((model.clone(), epoch, val_metric, Some(val_loss)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (model, best_epoch, best_val_metric, best_val_loss) = match best {
        Some(b) => b,
        None => (model, epochs_run - 1, None, None),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_metric,
        best_val_loss,
        epochs_run,
    })
}
