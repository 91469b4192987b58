use crate::error::{Error, Result};
use crate::numerics::{cast, Real, Tensor, Var};

/// Label-smoothed cross-entropy, averaged over positions whose target is
/// not `ignore_index`. The smoothing target is
/// `(1 - eps)·onehot + eps/V` over all `V` classes.
pub fn smoothed_ce<'t, T: Real>(
    logits: &Var<'t, T>,
    targets: &[usize],
    eps: f64,
    ignore_index: Option<usize>,
) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape("smoothed_ce", shape, &[targets.len()]));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::contract(format!("label smoothing {eps} outside [0, 1)")));
    }
    let (rows, classes) = (shape[0], shape[1]);
    let active: Vec<bool> = targets.iter().map(|&t| Some(t) != ignore_index).collect();
    let n_active = active.iter().filter(|&&a| a).count();
    if n_active == 0 {
        return Err(Error::contract("smoothed_ce over an all-padding batch"));
    }
    if let Some(&bad) = targets
        .iter()
        .zip(&active)
        .find(|(&t, &a)| a && t >= classes)
        .map(|(t, _)| t)
    {
        return Err(Error::contract(format!("target {bad} outside {classes} classes")));
    }
    let off = eps / classes as f64;
    let on = 1.0 - eps + off;
    let weights = Tensor::from_fn(&[rows, classes], |i| {
        let (r, c) = (i / classes, i % classes);
        if !active[r] {
            T::zero()
        } else if c == targets[r] {
            cast(on)
        } else {
            cast(off)
        }
    });
    let logp = logits.log_softmax(1)?;
    let q = logits.tape().constant(weights);
    Ok(logp.mul(&q)?.sum().scale(cast(-1.0 / n_active as f64)))
}
