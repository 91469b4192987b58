use crate::error::{Error, Result};
use crate::numerics::{cast, Real, Tensor, Var};

/// Mean sigmoid binary cross-entropy over every bit, in the stable
/// `softplus(x) - x·y` form.
pub fn multihot_bce<'t, T: Real>(logits: &Var<'t, T>, bits: &[u8]) -> Result<Var<'t, T>> {
    if logits.value().numel() != bits.len() {
        return Err(Error::shape("multihot_bce", logits.shape(), &[bits.len()]));
    }
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::contract("BCE target bits must be 0 or 1"));
    }
    let y = logits
        .tape()
        .constant(Tensor::from_fn(logits.shape(), |i| cast(f64::from(bits[i]))));
    Ok(logits.softplus().sub(&logits.mul(&y)?)?.mean())
}
