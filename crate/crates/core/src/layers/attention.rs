use super::{Binder, Linear, Scope};
use crate::error::{Error, Result};
use crate::numerics::{cast, Real, Var};

/// Scaled dot-product attention with `n_heads` heads over a shared
/// `d_model`, followed by an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub d_model: usize,
    pub n_heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(Self {
            d_model,
            n_heads,
            q: Linear::new(&mut scope.sub("q"), d_model, d_model)?,
            k: Linear::new(&mut scope.sub("k"), d_model, d_model)?,
            v: Linear::new(&mut scope.sub("v"), d_model, d_model)?,
            o: Linear::new(&mut scope.sub("o"), d_model, d_model)?,
        })
    }

    /// `query` is `[B, Lq, d]`, `memory` is `[B, Lk, d]`. `key_lengths`
    /// marks keys at positions `>= len` as padding; `causal` hides keys
    /// after the query position.
    pub fn forward<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        query: &Var<'t, T>,
        memory: &Var<'t, T>,
        key_lengths: Option<&[usize]>,
        causal: bool,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_with_weights(b, query, memory, key_lengths, causal)?.0)
    }

    /// Like [`forward`](Self::forward) and also returns the attention
    /// weights `[B, H, Lq, Lk]`.
    pub fn forward_with_weights<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        query: &Var<'t, T>,
        memory: &Var<'t, T>,
        key_lengths: Option<&[usize]>,
        causal: bool,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (qs, ms) = (query.shape(), memory.shape());
        if qs.len() != 3 || ms.len() != 3 || qs[0] != ms[0] || qs[2] != self.d_model || ms[2] != self.d_model {
            return Err(Error::shape("attention", qs, ms));
        }
        let (batch, lq, lk) = (qs[0], qs[1], ms[1]);
        if causal && lq != lk {
            return Err(Error::shape("causal attention", qs, ms));
        }
        let mask = build_mask(batch, self.n_heads, lq, lk, key_lengths, causal)?;

        let q = self.split_heads(&self.q.forward(b, query)?)?;
        let k = self.split_heads(&self.k.forward(b, memory)?)?;
        let v = self.split_heads(&self.v.forward(b, memory)?)?;
        let dh = self.d_model / self.n_heads;
        let mut scores = q.matmul_nt(&k)?.scale(cast(1.0 / (dh as f64).sqrt()));
        if let Some(mask) = mask {
            scores = scores.masked_fill(&mask, T::neg_infinity())?;
        }
        let weights = scores.softmax(3)?;
        let context = weights
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch, lq, self.d_model])?;
        Ok((self.o.forward(b, &context)?, weights))
    }

    fn split_heads<'t, T: Real>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (batch, len) = (x.shape()[0], x.shape()[1]);
        x.reshape(&[batch, len, self.n_heads, self.d_model / self.n_heads])?
            .permute(&[0, 2, 1, 3])
    }
}

/// `true` marks a hidden (query, key) pair. `None` when nothing is hidden.
fn build_mask(
    batch: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    key_lengths: Option<&[usize]>,
    causal: bool,
) -> Result<Option<Vec<bool>>> {
    if let Some(lengths) = key_lengths {
        if lengths.len() != batch {
            return Err(Error::shape("attention mask", &[batch, lk], &[lengths.len()]));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > lk) {
            return Err(Error::contract(format!(
                "key length {bad} invalid for {lk} keys (need 1..={lk})"
            )));
        }
    }
    let hides_padding = key_lengths.is_some_and(|ls| ls.iter().any(|&l| l < lk));
    if !hides_padding && !(causal && lk > 1) {
        return Ok(None);
    }
    let mut mask = vec![false; batch * heads * lq * lk];
    for bi in 0..batch {
        let len = key_lengths.map_or(lk, |ls| ls[bi]);
        for h in 0..heads {
            for i in 0..lq {
                let row = ((bi * heads + h) * lq + i) * lk;
                for j in 0..lk {
                    mask[row + j] = j >= len || (causal && j > i);
                }
            }
        }
    }
    Ok(Some(mask))
}
