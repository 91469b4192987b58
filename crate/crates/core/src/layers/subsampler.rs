use super::{Binder, Linear, ParamId, Scope};
use crate::error::{Error, Result};
use crate::numerics::{Real, Var};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PADDING: usize = 1;

/// Minimum input frames accepted by the subsampler.
pub const MIN_FRAMES: usize = 4;

/// Length after one kernel-3, stride-2, padding-1 stage.
fn stage_len(len: usize) -> usize {
    (len - 1) / 2 + 1
}

/// Sequence length after both convolution stages, roughly `len / 4`.
pub fn subsampled_len(len: usize) -> usize {
    stage_len(stage_len(len))
}

/// Two strided 3×3 convolutions over (time, frequency) followed by a
/// projection of the folded channel×frequency axis to `d_model`.
#[derive(Clone, Debug)]
pub struct ConvSubsampler {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub proj: Linear,
    pub n_mels: usize,
    pub channels: (usize, usize),
}

impl ConvSubsampler {
    pub fn new<T: Real>(
        scope: &mut Scope<'_, T>,
        n_mels: usize,
        channels: (usize, usize),
        d_model: usize,
    ) -> Result<Self> {
        let (c1, c2) = channels;
        let k2 = KERNEL * KERNEL;
        let conv1 = (
            scope.fan_in("conv1.weight", &[c1, 1, KERNEL, KERNEL], k2)?,
            scope.constant("conv1.bias", &[c1], 0.0)?,
        );
        let conv2 = (
            scope.fan_in("conv2.weight", &[c2, c1, KERNEL, KERNEL], c1 * k2)?,
            scope.constant("conv2.bias", &[c2], 0.0)?,
        );
        let folded = c2 * subsampled_len(n_mels);
        Ok(Self {
            conv1,
            conv2,
            proj: Linear::new(&mut scope.sub("proj"), folded, d_model)?,
            n_mels,
            channels,
        })
    }

    /// `features [B, T, n_mels]` → (`[B, T', d_model]`, per-item `T'`).
    pub fn forward<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        features: &Var<'t, T>,
        lengths: &[usize],
    ) -> Result<(Var<'t, T>, Vec<usize>)> {
        let shape = features.shape();
        if shape.len() != 3 || shape[2] != self.n_mels {
            return Err(Error::shape("subsample", shape, &[self.n_mels]));
        }
        let (batch, frames) = (shape[0], shape[1]);
        if lengths.len() != batch || lengths.iter().any(|&l| l > frames) {
            return Err(Error::shape("subsample lengths", shape, lengths));
        }
        if let Some(&short) = lengths.iter().chain([&frames]).find(|&&l| l < MIN_FRAMES) {
            return Err(Error::InputTooShort {
                len: short,
                min: MIN_FRAMES,
            });
        }
        let x = features.reshape(&[batch, 1, frames, self.n_mels])?;
        let mid_lens: Vec<usize> = lengths.iter().map(|&l| stage_len(l)).collect();
        let h = x
            .conv2d(&b.param(self.conv1.0), Some(&b.param(self.conv1.1)), STRIDE, PADDING)?
            .relu();
        let h = zero_time_padding(&h, &mid_lens)?;
        let out_lens: Vec<usize> = mid_lens.iter().map(|&l| stage_len(l)).collect();
        let h = h
            .conv2d(&b.param(self.conv2.0), Some(&b.param(self.conv2.1)), STRIDE, PADDING)?
            .relu();
        let h = zero_time_padding(&h, &out_lens)?;
        let (c2, t_out, f_out) = (h.shape()[1], h.shape()[2], h.shape()[3]);
        let folded = h.permute(&[0, 2, 1, 3])?.reshape(&[batch, t_out, c2 * f_out])?;
        Ok((self.proj.forward(b, &folded)?, out_lens))
    }
}

/// Zeroes `[B, C, T, F]` activations at time steps beyond each item's
/// length so that padded frames never leak into valid outputs.
fn zero_time_padding<'t, T: Real>(h: &Var<'t, T>, lengths: &[usize]) -> Result<Var<'t, T>> {
    let s = h.shape();
    let (batch, ch, time, freq) = (s[0], s[1], s[2], s[3]);
    if lengths.iter().all(|&l| l >= time) {
        return Ok(h.clone());
    }
    let mut mask = vec![false; h.value().numel()];
    for (bi, &len) in lengths.iter().enumerate() {
        for c in 0..ch {
            let start = ((bi * ch + c) * time + len) * freq;
            let end = ((bi * ch + c) * time + time) * freq;
            mask[start..end].iter_mut().for_each(|m| *m = true);
        }
    }
    debug_assert_eq!(batch, lengths.len());
    h.masked_fill(&mask, T::zero())
}
