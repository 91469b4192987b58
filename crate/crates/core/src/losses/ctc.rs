use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};

/// Frames needed to emit `target`: one per label plus one blank between
/// each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under CTC, summed over all
/// alignments.
///
/// `log_probs` is `[T, C]` with rows that are log-distributions. The
/// recursion runs in log space over the blank-interleaved label sequence,
/// one vector op per frame, so gradients come from the tape.
pub fn ctc_loss<'t, T: Real>(log_probs: &Var<'t, T>, target: &[usize], blank: usize) -> Result<Var<'t, T>> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(Error::shape("ctc_loss", shape, &[0, 0]));
    }
    let (frames, classes) = (shape[0], shape[1]);
    if blank >= classes {
        return Err(Error::contract(format!("blank {blank} outside {classes} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= classes || y == blank) {
        return Err(Error::contract(format!(
            "CTC target label {bad} is blank or out of range"
        )));
    }
    let needed = ctc_min_frames(target);
    if needed > frames {
        return Err(Error::InfeasibleTarget { needed, frames });
    }

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    let s = ext.len();
    let tape = log_probs.tape();
    let neg_inf = T::neg_infinity();
    let emit = log_probs.index_select(1, &ext)?;
    let row = |t: usize| emit.slice(0, t, t + 1).and_then(|r| r.reshape(&[s]));

    let start_mask: Vec<bool> = (0..s).map(|i| i >= 2).collect();
    let skip_blocked: Vec<bool> = (0..s)
        .map(|i| i < 2 || ext[i] == blank || ext[i] == ext[i - 2])
        .collect();
    let pad1 = tape.constant(Tensor::full(&[1], neg_inf));
    let pad2 = tape.constant(Tensor::full(&[2], neg_inf));

    let mut alpha = row(0)?.masked_fill(&start_mask, neg_inf)?;
    for t in 1..frames {
        let mut acc = alpha.clone();
        if s > 1 {
            let stay_or_advance = Var::concat(&[pad1.clone(), alpha.slice(0, 0, s - 1)?], 0)?;
            acc = acc.logaddexp(&stay_or_advance)?;
        }
        if s > 2 {
            let skip =
                Var::concat(&[pad2.clone(), alpha.slice(0, 0, s - 2)?], 0)?.masked_fill(&skip_blocked, neg_inf)?;
            acc = acc.logaddexp(&skip)?;
        }
        alpha = acc.add(&row(t)?)?;
    }
    let log_likelihood = if s > 1 {
        alpha.slice(0, s - 1, s)?.logaddexp(&alpha.slice(0, s - 2, s - 1)?)?
    } else {
        alpha
    };
    Ok(log_likelihood.sum().neg())
}

/// Mean per-utterance CTC loss over a padded batch `[B, T, C]`.
pub fn ctc_loss_batch<'t, T: Real>(
    log_probs: &Var<'t, T>,
    lengths: &[usize],
    targets: &[Vec<usize>],
    blank: usize,
) -> Result<Var<'t, T>> {
    let shape = log_probs.shape();
    if shape.len() != 3 || lengths.len() != shape[0] || targets.len() != shape[0] {
        return Err(Error::shape("ctc_loss_batch", shape, &[lengths.len(), targets.len()]));
    }
    let (batch, frames, classes) = (shape[0], shape[1], shape[2]);
    let mut total: Option<Var<'t, T>> = None;
    for (bi, (target, &len)) in targets.iter().zip(lengths).enumerate() {
        let item = log_probs
            .slice(0, bi, bi + 1)?
            .reshape(&[frames, classes])?
            .slice(0, 0, len)?;
        let loss = ctc_loss(&item, target, blank)?;
        total = Some(match total {
            Some(acc) => acc.add(&loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::contract("empty CTC batch"))?;
    Ok(total.scale(crate::numerics::cast(1.0 / batch as f64)))
}
