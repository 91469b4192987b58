use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::pipeline::{class_metric, schema_of, transcribe, PipelineConfig, TextClassifier};
use super::report::{Arm, CurveReport, CurveRow};
use crate::data::{subset_per_class, Manifest, Utterance};
use crate::decode::evaluate;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Model, ModelConfig, TapPoint, SLU_PREFIX};
use crate::numerics::rng::Rng;
use crate::tokenizer::Vocab;
use crate::training::{apply_checkpoint, finetune_mtl, Checkpoint, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Training examples per class, ascending.
    pub sizes: Vec<usize>,
    pub folds: usize,
    pub arms: Vec<Arm>,
    /// Taps compared by the ablation.
    pub taps: Vec<TapPoint>,
    /// Examples per class in every ablation cell.
    pub ablation_size: usize,
    /// Validation examples per class, drawn from what the fold leaves over.
    pub val_per_class: usize,
    pub pipeline: PipelineConfig,
    /// Worker threads for independent cells.
    pub jobs: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1, 2, 4, 8],
            folds: 5,
            arms: vec![Arm::Mtl, Arm::Pipeline],
            taps: vec![
                TapPoint::encoder(3),
                TapPoint::asr(0),
                TapPoint::asr(2),
                TapPoint::asr(5),
            ],
            ablation_size: 2,
            val_per_class: 1,
            pipeline: PipelineConfig::default(),
            jobs: 1,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sizes.is_empty() || self.sizes.contains(&0) || !self.sizes.windows(2).all(|w| w[0] < w[1]) {
            return fail(format!(
                "harness.sizes must be positive and strictly ascending, got {:?}",
                self.sizes
            ));
        }
        if self.folds < 3 {
            return fail(format!("harness.folds must be at least 3, got {}", self.folds));
        }
        if self.arms.is_empty() || self.jobs == 0 || self.ablation_size == 0 || self.val_per_class == 0 {
            return fail("harness.arms, jobs, ablation_size and val_per_class must be non-empty/positive".into());
        }
        for &tap in &self.taps {
            model.clone().with_tap(tap).validate()?;
        }
        self.pipeline.validate()
    }

    /// Examples per class the pool must hold.
    pub fn pool_per_class(&self) -> usize {
        self.sizes
            .iter()
            .copied()
            .chain([self.ablation_size])
            .max()
            .unwrap_or(1)
            + self.val_per_class
    }
}

pub type Progress = dyn Fn(&Cell, &[CurveRow]) + Sync;

/// Everything a cell needs; cells share it read-only.
pub struct Experiment<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub harness: &'a HarnessConfig,
    /// Pretrained ASR weights every arm starts from.
    pub checkpoint: &'a Checkpoint,
    /// Training and validation examples are drawn from here.
    pub pool: &'a Manifest,
    pub test: &'a Manifest,
    pub vocab: &'a Vocab,
    pub config_hash: String,
    /// Called after each finished cell.
    pub progress: Option<&'a Progress>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub size: usize,
    pub fold: usize,
    pub arm: Arm,
    pub tap: TapPoint,
}

/// Seed for the class-balanced draw of `fold`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    Rng::stream(seed, "fold").split(fold as u64).next_u64()
}

/// Seed for model initialisation and batching in `fold`; shared by all
/// arms so that their comparison is paired.
pub fn cell_seed(seed: u64, fold: usize) -> u64 {
    Rng::stream(seed, "cell").split(fold as u64).next_u64()
}

/// Training and validation sets for a fold. Smaller sizes are prefixes of
/// larger ones within a fold.
pub fn fold_split(exp: &Experiment<'_>, size: usize, fold: usize) -> Result<(Manifest, Manifest)> {
    let schema = schema_of(&exp.model.task);
    let seed = fold_seed(exp.train.seed, fold);
    let train = subset_per_class(exp.pool, size, seed, schema)?;
    let both = subset_per_class(exp.pool, size + exp.harness.val_per_class, seed, schema)?;
    let val = Manifest::new(
        both.utterances
            .into_iter()
            .filter(|u| !train.utterances.iter().any(|t| t.id == u.id))
            .collect(),
    );
    Ok((train, val))
}

fn refs(m: &Manifest) -> Vec<&Utterance> {
    m.utterances.iter().collect()
}

fn row(cell: &Cell, metric: &str, value: f64) -> CurveRow {
    CurveRow {
        size: cell.size,
        fold: cell.fold,
        arm: cell.arm,
        tap: cell.tap,
        metric: metric.to_string(),
        value,
    }
}

/// Trains and scores one cell. The result depends only on the experiment
/// inputs and the cell itself.
pub fn run_cell(exp: &Experiment<'_>, cell: &Cell) -> Result<Vec<CurveRow>> {
    let (train_set, val_set) = fold_split(exp, cell.size, cell.fold)?;
    let seed = cell_seed(exp.train.seed, cell.fold);
    if cell.arm.is_cascade() {
        let (metric, value) = cascade(exp, &train_set, cell.arm == Arm::Nlp, seed)?;
        return Ok(vec![row(cell, &metric, value)]);
    }
    let config = exp.model.clone().with_tap(cell.tap);
    let weights = match cell.arm {
        Arm::SluOnly => LossWeights {
            w_asr: 0.0,
            w_slu: 1.0,
            ..exp.train.weights
        },
        _ => exp.train.weights,
    };
    let train_cfg = TrainConfig {
        seed,
        weights,
        ..exp.train.clone()
    };
    let outcome = finetune_mtl::<f32>(
        config,
        &train_cfg,
        exp.checkpoint,
        &train_set,
        Some(&val_set),
        exp.vocab,
    )?;
    let report = evaluate(&outcome.model, &refs(exp.test), exp.vocab, &exp.train.eval)?;
    let metric = if report.accuracy.is_some() {
        "accuracy"
    } else {
        "macro_f1"
    };
    let value = report
        .slu_metric()
        .ok_or_else(|| Error::Data("test set has no labels".into()))?;
    Ok(vec![
        row(cell, metric, value),
        row(cell, "wer_ctc", report.wer_ctc),
        row(cell, "wer_attn", report.wer_attn),
    ])
}

/// Text classifier on ASR (or gold) transcripts; returns the headline
/// metric on the test set.
fn cascade(exp: &Experiment<'_>, train_set: &Manifest, oracle: bool, seed: u64) -> Result<(String, f64)> {
    let cfg = &exp.harness.pipeline;
    let (train_texts, test_texts) = if oracle {
        let gold = |m: &Manifest| m.utterances.iter().map(|u| u.transcript.clone()).collect::<Vec<_>>();
        (gold(train_set), gold(exp.test))
    } else {
        let mut asr = Model::<f32>::new(exp.model.clone(), seed)?;
        apply_checkpoint(&mut asr, &exp.checkpoint.tensors, Some(SLU_PREFIX), false)?;
        (
            transcribe(&asr, &refs(train_set), exp.vocab, cfg)?,
            transcribe(&asr, &refs(exp.test), exp.vocab, cfg)?,
        )
    };
    let labels: Vec<_> = train_set.utterances.iter().map(|u| u.label.clone()).collect();
    let classifier = TextClassifier::train(&train_texts, &labels, &exp.model.task, cfg, seed)?;
    let preds = classifier.predict(&test_texts)?;
    let schema = schema_of(&exp.model.task);
    let golds = exp
        .test
        .utterances
        .iter()
        .map(|u| u.class(schema))
        .collect::<Result<Vec<_>>>()?;
    class_metric(&exp.model.task, &preds, &golds)
}

/// Headline test metric of the cascade baseline for one fold; `oracle`
/// substitutes gold transcripts for ASR output.
pub fn run_pipeline_baseline(exp: &Experiment<'_>, size: usize, fold: usize, oracle: bool) -> Result<f64> {
    let (train_set, _) = fold_split(exp, size, fold)?;
    Ok(cascade(exp, &train_set, oracle, cell_seed(exp.train.seed, fold))?.1)
}

/// Runs cells on `jobs` threads; rows come back in cell order.
pub fn run_cells(exp: &Experiment<'_>, cells: &[Cell]) -> Result<Vec<CurveRow>> {
    let slots: Vec<Mutex<Option<Result<Vec<CurveRow>>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= cells.len() {
            break;
        }
        let result = run_cell(exp, &cells[i]);
        if let (Ok(rows), Some(progress)) = (&result, exp.progress) {
            progress(&cells[i], rows);
        }
        *slots[i].lock().expect("result slot") = Some(result);
    };
    let jobs = exp.harness.jobs.clamp(1, cells.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let mut rows = Vec::new();
    for slot in slots {
        rows.extend(slot.into_inner().expect("result slot").expect("every cell ran")?);
    }
    Ok(rows)
}

fn report(exp: &Experiment<'_>, rows: Vec<CurveRow>) -> CurveReport {
    let metric = match exp.model.task {
        crate::model::Task::Intent(_) => "accuracy",
        crate::model::Task::Sentiment { .. } => "macro_f1",
    };
    CurveReport {
        config_hash: exp.config_hash.clone(),
        seed: exp.train.seed,
        metric: metric.into(),
        rows,
    }
}

pub fn learning_curve_cells(h: &HarnessConfig, tap: TapPoint) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &size in &h.sizes {
        for &arm in &h.arms {
            for fold in 0..h.folds {
                cells.push(Cell { size, fold, arm, tap });
            }
        }
    }
    cells
}

/// Headline metric against train size for every configured arm, all from
/// the same pretrained checkpoint.
pub fn run_learning_curve(exp: &Experiment<'_>) -> Result<CurveReport> {
    exp.harness.validate(exp.model)?;
    let rows = run_cells(exp, &learning_curve_cells(exp.harness, exp.model.tap))?;
    Ok(report(exp, rows))
}

pub fn ablation_cells(taps: &[TapPoint], n_per_class: usize, folds: usize) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &tap in taps {
        for arm in [Arm::Mtl, Arm::SluOnly] {
            for fold in 0..folds {
                cells.push(Cell {
                    size: n_per_class,
                    fold,
                    arm,
                    tap,
                });
            }
        }
    }
    cells
}

/// Multitask and SLU-only finetuning for every tap and fold.
pub fn run_ablation(exp: &Experiment<'_>, taps: &[TapPoint], n_per_class: usize, folds: usize) -> Result<CurveReport> {
    for &tap in taps {
        exp.model.clone().with_tap(tap).validate()?;
    }
    if taps.is_empty() || folds == 0 {
        return Err(Error::Config("ablation needs at least one tap and one fold".into()));
    }
    let rows = run_cells(exp, &ablation_cells(taps, n_per_class, folds))?;
    Ok(report(exp, rows))
}
