//! Neural building blocks on top of the autodiff tape.

mod attention;
mod class_attention;
mod params;
mod subsampler;
mod transformer;

pub use attention::MultiHeadAttention;
pub use class_attention::ClassAttention;
pub use params::{Binder, ParamId, ParamStore, Scope};
pub use subsampler::{subsampled_len, ConvSubsampler};
pub use transformer::{sinusoidal_positions, DecoderLayer, EncoderLayer};

use crate::error::Result;
use crate::numerics::{Real, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Affine map `x·W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.fan_in("weight", &[d_in, d_out], d_in)?,
            bias: scope.constant("bias", &[d_out], 0.0)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let w = b.param(self.weight);
        let bias = b.param(self.bias);
        let shape = x.shape().to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[rows, self.d_in])?;
        let y = flat.matmul(&w)?.add(&bias)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.d_out;
        y.reshape(&out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.constant("gamma", &[d], 1.0)?,
            beta: scope.constant("beta", &[d], 0.0)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&b.param(self.gamma), &b.param(self.beta), LN_EPS)
    }
}

/// Position-wise `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(scope: &mut Scope<'_, T>, d_model: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&mut scope.sub("up"), d_model, d_ff)?,
            down: Linear::new(&mut scope.sub("down"), d_ff, d_model)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.down.forward(b, &self.up.forward(b, x)?.gelu())
    }
}
