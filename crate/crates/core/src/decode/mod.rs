//! Decoding (CTC greedy, attention beam search) and evaluation metrics.

mod beam;
mod metrics;
mod report;

pub use beam::{attn_beam, beam_search, Hypothesis, StepScorer};
pub use metrics::{edit_distance, intent_accuracy, macro_f1, wer, ClassScore, F1Report};
pub use report::{evaluate, evaluate_encoded, EvalOptions, EvalReport, ItemResult, PerClass};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Per-frame argmax, then merge adjacent repeats, then drop blanks.
pub fn ctc_greedy<T: Real>(log_probs: &Tensor<T>, blank: usize) -> Result<Vec<usize>> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(Error::shape("ctc_greedy", shape, &[0, 0]));
    }
    let classes = shape[1];
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.data().chunks(classes) {
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    Ok(out)
}
