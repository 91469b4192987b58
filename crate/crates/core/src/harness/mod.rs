//! Experiment orchestration: learning curves, tap ablation and the cascade
//! baseline, each as a grid of independent, deterministic cells.

mod pipeline;
mod report;
mod runner;
pub mod stats;

pub use pipeline::{class_metric, transcribe, PipelineConfig, TextClassifier, TranscriptSource};
pub use report::{Arm, CurvePoint, CurveReport, CurveRow, CSV_HEADER};
pub use runner::{
    ablation_cells, cell_seed, fold_seed, fold_split, learning_curve_cells, run_ablation, run_cell, run_cells,
    run_learning_curve, run_pipeline_baseline, Cell, Experiment, HarnessConfig, Progress,
};
