//! Central finite-difference gradient checking.
//!
//! The checked function is re-evaluated on fresh tapes with each input
//! coordinate perturbed by ±h; only its forward values are used, so the
//! oracle is independent of every backward rule.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    /// Largest per-element `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative-error floor that keeps near-zero gradients from amplifying noise.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares autodiff gradients of `f(inputs)` (a scalar) against central
/// differences with step `h`, over every coordinate of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let grads = loss.backward()?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get(v).expect("leaf requires grad")).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = input.to_vec();
            plus[i] += h;
            work[which] = Tensor::new(input.shape(), plus)?;
            let fp = eval(&work)?;
            let mut minus = input.to_vec();
            minus[i] -= h;
            work[which] = Tensor::new(input.shape(), minus)?;
            let fm = eval(&work)?;
            work[which] = input.clone();

            let numeric = (fp - fm) / (2.0 * h);
            let exact = analytic[which].data()[i];
            let abs = (exact - numeric).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
