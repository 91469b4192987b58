use serde::{Deserialize, Serialize};

use super::{ctc_loss_batch, multihot_bce, smoothed_ce};
use crate::data::Label;
use crate::error::{Error, Result};
use crate::intent::{encode_intent, IntentSchema};
use crate::model::ForwardOutput;
use crate::numerics::{cast, Real, Var};
use crate::tokenizer::{BLANK, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Share λ of CTC inside the ASR loss; the decoder gets `1 − λ`.
    pub ctc_weight: f64,
    pub w_asr: f64,
    pub w_slu: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ctc_weight: 0.3,
            w_asr: 0.5,
            w_slu: 0.5,
            label_smoothing: 0.1,
        }
    }
}

impl LossWeights {
    /// ASR-only weights, as used for pretraining.
    pub fn asr_only(self) -> Self {
        Self {
            w_asr: 1.0,
            w_slu: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.ctc_weight, self.w_asr, self.w_slu, self.label_smoothing];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config(format!("ctc_weight {} outside [0, 1]", self.ctc_weight)));
        }
        if self.w_asr < 0.0 || self.w_slu < 0.0 {
            return Err(Error::Config(format!(
                "negative task weight (w_asr {}, w_slu {})",
                self.w_asr, self.w_slu
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Values of the individual terms; `None` when a term was not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ctc: f64,
    pub ce: f64,
    pub slu: Option<f64>,
}

/// `w_asr·(λ·L_ctc + (1−λ)·L_ce) + w_slu·L_slu`.
///
/// Terms whose weight is zero are evaluated for the breakdown but kept out
/// of the graph, so they contribute neither value nor gradient. The SLU
/// term is skipped entirely when `w_slu == 0`.
pub fn joint_loss<'t, T: Real>(
    out: &ForwardOutput<'t, T>,
    tokens: &[Vec<usize>],
    labels: &[Label],
    schema: Option<&IntentSchema>,
    weights: &LossWeights,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    weights.validate()?;
    let ctc = ctc_loss_batch(&out.ctc_log_probs, &out.ctc_lengths, tokens, BLANK)?;
    let ce = decoder_ce(out, tokens, weights.label_smoothing)?;
    let slu = if weights.w_slu > 0.0 {
        Some(slu_loss(&out.slu_logits, labels, schema, weights.label_smoothing)?)
    } else {
        None
    };

    let mut terms = Vec::new();
    let lambda = weights.ctc_weight;
    if weights.w_asr > 0.0 && lambda > 0.0 {
        terms.push(ctc.scale(cast(weights.w_asr * lambda)));
    }
    if weights.w_asr > 0.0 && lambda < 1.0 {
        terms.push(ce.scale(cast(weights.w_asr * (1.0 - lambda))));
    }
    if let Some(s) = &slu {
        terms.push(s.scale(cast(weights.w_slu)));
    }
    let mut total = match terms.first() {
        Some(t) => t.clone(),
        None => ctc.scale(T::zero()).detach(),
    };
    for t in terms.iter().skip(1) {
        total = total.add(t)?;
    }
    let value = |v: &Var<'t, T>| v.value().item().to_f64().unwrap_or(f64::NAN);
    let breakdown = LossBreakdown {
        total: value(&total),
        ctc: value(&ctc),
        ce: value(&ce),
        slu: slu.as_ref().map(value),
    };
    Ok((total, breakdown))
}

/// Label-smoothed CE of the teacher-forced decoder against `y <eos>`.
fn decoder_ce<'t, T: Real>(out: &ForwardOutput<'t, T>, tokens: &[Vec<usize>], eps: f64) -> Result<Var<'t, T>> {
    let shape = out.dec_logits.shape();
    let (batch, width, vocab) = (shape[0], shape[1], shape[2]);
    if tokens.len() != batch {
        return Err(Error::shape("decoder targets", shape, &[tokens.len()]));
    }
    let mut targets = Vec::with_capacity(batch * width);
    for y in tokens {
        if y.len() + 1 > width {
            return Err(Error::shape("decoder targets", shape, &[y.len() + 1]));
        }
        targets.extend(y.iter().copied().chain([EOS]).chain(std::iter::repeat(PAD)).take(width));
    }
    smoothed_ce(
        &out.dec_logits.reshape(&[batch * width, vocab])?,
        &targets,
        eps,
        Some(PAD),
    )
}

fn slu_loss<'t, T: Real>(
    logits: &Var<'t, T>,
    labels: &[Label],
    schema: Option<&IntentSchema>,
    eps: f64,
) -> Result<Var<'t, T>> {
    match labels.first() {
        Some(Label::Intent(_)) => {
            let schema = schema.ok_or_else(|| Error::contract("intent labels without a schema"))?;
            let mut bits = Vec::new();
            for label in labels {
                match label {
                    Label::Intent(intent) => bits.extend(encode_intent(schema, intent)?.bits),
                    other => return Err(Error::contract(format!("mixed labels in batch: {other:?}"))),
                }
            }
            multihot_bce(logits, &bits)
        }
        Some(Label::Sentiment(_)) => {
            let classes = labels
                .iter()
                .map(|l| match l {
                    Label::Sentiment(c) => Ok(*c),
                    other => Err(Error::contract(format!("mixed labels in batch: {other:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            smoothed_ce(logits, &classes, eps, None)
        }
        _ => Err(Error::contract("SLU loss requested for a batch without labels")),
    }
}
