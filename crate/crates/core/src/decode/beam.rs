use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{EncodedItem, Model};
use crate::numerics::Real;
use crate::tokenizer::{EOS, SOS};

/// Anything that can score the next token after a batch of prefixes.
pub trait StepScorer {
    /// One log-distribution over the vocabulary per prefix. Prefixes start
    /// with `<sos>`; impossible tokens carry `-inf`.
    fn step(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

struct ModelScorer<'a, T: Real> {
    model: &'a Model<T>,
    item: &'a EncodedItem<T>,
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    fn step(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.model.next_token_log_probs(self.item, prefixes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Emitted tokens without `<sos>`/`<eos>`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / length^len_penalty`, length counting `<eos>` if emitted.
    pub score: f64,
    pub finished: bool,
}

struct Partial {
    tokens: Vec<usize>,
    log_prob: f64,
}

fn normalise(log_prob: f64, length: usize, len_penalty: f64) -> f64 {
    log_prob / (length.max(1) as f64).powf(len_penalty)
}

/// Standard beam search. Each step keeps the `beam` best extensions;
/// extensions ending in `<eos>` retire. Search ends when `beam`
/// hypotheses have retired or after `max_len` tokens. Results are sorted
/// by score, best first.
pub fn beam_search(scorer: &dyn StepScorer, beam: usize, max_len: usize, len_penalty: f64) -> Result<Vec<Hypothesis>> {
    if beam < 1 || max_len < 1 {
        return Err(Error::contract(format!(
            "beam search needs beam >= 1 and max_len >= 1 (got {beam}, {max_len})"
        )));
    }
    let mut alive = vec![Partial {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = alive
            .iter()
            .map(|p| std::iter::once(SOS).chain(p.tokens.iter().copied()).collect())
            .collect();
        let dists = scorer.step(&prefixes)?;
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (h, dist) in dists.iter().enumerate() {
            for (tok, &lp) in dist.iter().enumerate() {
                if lp.is_finite() {
                    candidates.push((h, tok, alive[h].log_prob + lp));
                }
            }
        }
        // Highest log-prob first; ties keep hypothesis then token order.
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(Ordering::Equal)
                .then((a.0, a.1).cmp(&(b.0, b.1)))
        });
        let mut next = Vec::new();
        for (h, tok, lp) in candidates.into_iter().take(beam) {
            if tok == EOS {
                let tokens = alive[h].tokens.clone();
                let len = tokens.len() + 1;
                done.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    score: normalise(lp, len, len_penalty),
                    finished: true,
                });
            } else {
                let mut tokens = alive[h].tokens.clone();
                tokens.push(tok);
                next.push(Partial { tokens, log_prob: lp });
            }
        }
        alive = next;
        if done.len() >= beam || alive.is_empty() {
            break;
        }
    }
    done.extend(alive.into_iter().map(|p| Hypothesis {
        score: normalise(p.log_prob, p.tokens.len(), len_penalty),
        tokens: p.tokens,
        log_prob: p.log_prob,
        finished: false,
    }));
    done.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    done.truncate(beam);
    Ok(done)
}

/// Beam search over the attention decoder for one encoded utterance.
pub fn attn_beam<T: Real>(
    model: &Model<T>,
    item: &EncodedItem<T>,
    beam: usize,
    max_len: usize,
    len_penalty: f64,
) -> Result<Vec<Hypothesis>> {
    beam_search(&ModelScorer { model, item }, beam, max_len, len_penalty)
}
