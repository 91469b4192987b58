use super::{Binder, FeedForward, LayerNorm, MultiHeadAttention, Scope};
use crate::error::Result;
use crate::numerics::{cast, Real, Tensor, Var};

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, d_model: usize, n_heads: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(&mut scope.sub("attn_norm"), d_model)?,
            attn: MultiHeadAttention::new(&mut scope.sub("attn"), d_model, n_heads)?,
            ff_norm: LayerNorm::new(&mut scope.sub("ff_norm"), d_model)?,
            ff: FeedForward::new(&mut scope.sub("ff"), d_model, d_ff)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>, lengths: &[usize]) -> Result<Var<'t, T>> {
        let h = self.attn_norm.forward(b, x)?;
        let x = x.add(&self.attn.forward(b, &h, &h, Some(lengths), false)?)?;
        let h = self.ff_norm.forward(b, &x)?;
        x.add(&self.ff.forward(b, &h)?)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// encoder memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, d_model: usize, n_heads: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            self_norm: LayerNorm::new(&mut scope.sub("self_norm"), d_model)?,
            self_attn: MultiHeadAttention::new(&mut scope.sub("self_attn"), d_model, n_heads)?,
            cross_norm: LayerNorm::new(&mut scope.sub("cross_norm"), d_model)?,
            cross_attn: MultiHeadAttention::new(&mut scope.sub("cross_attn"), d_model, n_heads)?,
            ff_norm: LayerNorm::new(&mut scope.sub("ff_norm"), d_model)?,
            ff: FeedForward::new(&mut scope.sub("ff"), d_model, d_ff)?,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        x: &Var<'t, T>,
        target_lengths: &[usize],
        memory: &Var<'t, T>,
        memory_lengths: &[usize],
    ) -> Result<Var<'t, T>> {
        let h = self.self_norm.forward(b, x)?;
        let x = x.add(&self.self_attn.forward(b, &h, &h, Some(target_lengths), true)?)?;
        let h = self.cross_norm.forward(b, &x)?;
        let x = x.add(&self.cross_attn.forward(b, &h, memory, Some(memory_lengths), false)?)?;
        let h = self.ff_norm.forward(b, &x)?;
        x.add(&self.ff.forward(b, &h)?)
    }
}

/// Standard sinusoidal position table `[len, d_model]`.
pub fn sinusoidal_positions<T: Real>(len: usize, d_model: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, d_model], |i| {
        let (pos, dim) = ((i / d_model) as f64, i % d_model);
        let rate = 10000f64.powf(-((dim / 2 * 2) as f64) / d_model as f64);
        let angle = pos * rate;
        cast(if dim % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
