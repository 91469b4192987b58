use serde::{Deserialize, Serialize};

use super::{attn_beam, ctc_greedy, edit_distance, macro_f1};
use crate::data::{Label, Utterance, SENTIMENT_CLASSES};
use crate::error::{Error, Result};
use crate::intent::decode_intent;
use crate::model::{EncodedItem, Model, Task};
use crate::numerics::Real;
use crate::tokenizer::{Vocab, BLANK};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub max_decode_len: usize,
    /// 1 is greedy decoding.
    pub beam: usize,
    pub len_penalty: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_decode_len: 48,
            beam: 1,
            len_penalty: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerClass {
    pub label: String,
    pub support: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub absent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemResult {
    pub id: String,
    pub ctc_hypothesis: String,
    pub attn_hypothesis: String,
    pub predicted_class: Option<usize>,
    pub gold_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub wer_ctc: f64,
    pub wer_attn: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    pub n_items: usize,
    pub per_class: Vec<PerClass>,
    #[serde(skip)]
    pub items: Vec<ItemResult>,
}

impl EvalReport {
    /// The task's headline metric: intent accuracy or sentiment macro-F1.
    pub fn slu_metric(&self) -> Option<f64> {
        self.accuracy.or(self.macro_f1)
    }
}

/// Encodes and evaluates every utterance.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    utterances: &[&Utterance],
    vocab: &Vocab,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let items = utterances
        .iter()
        .map(|u| model.encode_item(&u.features.cast()))
        .collect::<Result<Vec<_>>>()?;
    evaluate_encoded(model, &items, utterances, vocab, opts)
}

/// Evaluation from precomputed encoder results (one per utterance).
pub fn evaluate_encoded<T: Real>(
    model: &Model<T>,
    items: &[EncodedItem<T>],
    utterances: &[&Utterance],
    vocab: &Vocab,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if items.len() != utterances.len() {
        return Err(Error::shape("evaluate", &[items.len()], &[utterances.len()]));
    }
    if items.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let task = &model.config().task;
    let words = |text: &str| text.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let (mut ref_words, mut ctc_errors, mut attn_errors) = (0usize, 0usize, 0usize);
    let mut results = Vec::with_capacity(items.len());
    for (item, utt) in items.iter().zip(utterances) {
        let ctc_text = vocab.decode(&ctc_greedy(&item.ctc_log_probs, BLANK)?);
        let tokens = if opts.beam <= 1 {
            model.greedy(item, opts.max_decode_len)?
        } else {
            attn_beam(model, item, opts.beam, opts.max_decode_len, opts.len_penalty)?
                .swap_remove(0)
                .tokens
        };
        let attn_text = vocab.decode(&tokens);
        let reference = words(&utt.transcript);
        ref_words += reference.len();
        ctc_errors += edit_distance(&reference, &words(&ctc_text));
        attn_errors += edit_distance(&reference, &words(&attn_text));

        let (predicted_class, gold_class) = match (&utt.label, task) {
            (Label::None, _) => (None, None),
            (label, Task::Intent(schema)) => {
                let Label::Intent(gold) = label else {
                    return Err(Error::Data(format!("utterance {} is not intent-labelled", utt.id)));
                };
                let logits: Vec<f32> = model
                    .slu_logits(item, &tokens)?
                    .iter()
                    .map(|v| v.to_f32().unwrap_or(f32::NAN))
                    .collect();
                let pred = decode_intent(schema, &logits)?;
                schema.check(gold)?;
                (Some(schema.class_of(&pred)), Some(schema.class_of(gold)))
            }
            (label, Task::Sentiment { n_classes }) => {
                let Label::Sentiment(gold) = label else {
                    return Err(Error::Data(format!("utterance {} is not sentiment-labelled", utt.id)));
                };
                if gold >= n_classes {
                    return Err(Error::Data(format!(
                        "utterance {} has class {gold} of {n_classes}",
                        utt.id
                    )));
                }
                let logits = model.slu_logits(item, &tokens)?;
                let mut best = 0;
                for (i, v) in logits.iter().enumerate() {
                    if *v > logits[best] {
                        best = i;
                    }
                }
                (Some(best), Some(*gold))
            }
        };
        results.push(ItemResult {
            id: utt.id.clone(),
            ctc_hypothesis: ctc_text,
            attn_hypothesis: attn_text,
            predicted_class,
            gold_class,
        });
    }
    let rate = |errors: usize| {
        if ref_words == 0 {
            0.0
        } else {
            errors as f64 / ref_words as f64
        }
    };
    let labelled: Vec<(usize, usize)> = results
        .iter()
        .filter_map(|r| Some((r.predicted_class?, r.gold_class?)))
        .collect();
    let (preds, golds): (Vec<usize>, Vec<usize>) = labelled.iter().copied().unzip();
    let (accuracy, macro_score, per_class) = if labelled.is_empty() {
        (None, None, Vec::new())
    } else {
        let (n_classes, name): (usize, Box<dyn Fn(usize) -> String>) = match task {
            Task::Intent(schema) => (
                schema.n_classes(),
                Box::new(move |c| schema.describe(&schema.intent_of_class(c))),
            ),
            Task::Sentiment { n_classes } => (
                *n_classes,
                Box::new(move |c| {
                    if *n_classes == SENTIMENT_CLASSES.len() {
                        SENTIMENT_CLASSES[c].to_string()
                    } else {
                        format!("class{c}")
                    }
                }),
            ),
        };
        let f1 = macro_f1(&preds, &golds, n_classes)?;
        let per_class = f1
            .per_class
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(task, Task::Sentiment { .. }) || s.support > 0)
            .map(|(c, s)| PerClass {
                label: name(c),
                support: s.support,
                correct: labelled.iter().filter(|&&(p, g)| p == c && g == c).count(),
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                absent: s.absent,
            })
            .collect();
        let hits = labelled.iter().filter(|(p, g)| p == g).count();
        match task {
            Task::Intent(_) => (Some(hits as f64 / labelled.len() as f64), None, per_class),
            Task::Sentiment { .. } => (None, Some(f1.macro_f1), per_class),
        }
    };
    Ok(EvalReport {
        wer_ctc: rate(ctc_errors),
        wer_attn: rate(attn_errors),
        accuracy,
        macro_f1: macro_score,
        n_items: items.len(),
        per_class,
        items: results,
    })
}
