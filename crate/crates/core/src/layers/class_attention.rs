use super::{Binder, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId, Scope};
use crate::error::{Error, Result};
use crate::numerics::{Real, Var};

/// Attention pooling with a learned class token.
///
/// The class token is the only query; keys and values come exclusively from
/// the summarised sequence. The pooled vector goes through a residual
/// feed-forward block and a projection to `n_labels` unnormalised logits.
#[derive(Clone, Debug)]
pub struct ClassAttention {
    pub cls: ParamId,
    pub memory_norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
    pub out_norm: LayerNorm,
    pub out: Linear,
    pub d_model: usize,
    pub n_labels: usize,
}

impl ClassAttention {
    pub fn new<T: Real>(
        scope: &mut Scope<'_, T>,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        n_labels: usize,
    ) -> Result<Self> {
        Ok(Self {
            cls: scope.uniform("cls", &[d_model], 1.0)?,
            memory_norm: LayerNorm::new(&mut scope.sub("memory_norm"), d_model)?,
            attention: MultiHeadAttention::new(&mut scope.sub("attention"), d_model, n_heads)?,
            ff_norm: LayerNorm::new(&mut scope.sub("ff_norm"), d_model)?,
            ff: FeedForward::new(&mut scope.sub("ff"), d_model, d_ff)?,
            out_norm: LayerNorm::new(&mut scope.sub("out_norm"), d_model)?,
            out: Linear::new(&mut scope.sub("out"), d_model, n_labels)?,
            d_model,
            n_labels,
        })
    }

    /// Single-query pooling of `memory [B, L, d]` to its attention summary
    /// `[B, 1, d]`, before the feed-forward block.
    pub fn pool<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        memory: &Var<'t, T>,
        lengths: &[usize],
    ) -> Result<Var<'t, T>> {
        let shape = memory.shape();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(Error::shape("class attention", shape, &[self.d_model]));
        }
        let batch = shape[0];
        if lengths.len() != batch {
            return Err(Error::shape("class attention lengths", shape, &[lengths.len()]));
        }
        if let Some(i) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::contract(format!(
                "class attention over a fully masked sequence (batch item {i})"
            )));
        }
        let query = b
            .param(self.cls)
            .reshape(&[1, self.d_model])?
            .index_select(0, &vec![0; batch])?
            .reshape(&[batch, 1, self.d_model])?;
        let kv = self.memory_norm.forward(b, memory)?;
        self.attention.forward(b, &query, &kv, Some(lengths), false)
    }

    /// Logits `[B, n_labels]`.
    pub fn forward<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        memory: &Var<'t, T>,
        lengths: &[usize],
    ) -> Result<Var<'t, T>> {
        let batch = memory.shape()[0];
        let pooled = self.pool(b, memory, lengths)?;
        let h = pooled.add(&self.ff.forward(b, &self.ff_norm.forward(b, &pooled)?)?)?;
        let logits = self.out.forward(b, &self.out_norm.forward(b, &h)?)?;
        logits.reshape(&[batch, self.n_labels])
    }
}
