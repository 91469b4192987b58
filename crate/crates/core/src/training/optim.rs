use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::numerics::{cast, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up to the base rate, then inverse square-root decay.
    Noam {
        warmup_steps: usize,
    },
}

impl LrSchedule {
    /// Learning rate at 1-based `step`.
    pub fn at(&self, base: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Noam { warmup_steps } => {
                let (s, w) = (step.max(1) as f64, warmup_steps.max(1) as f64);
                base * (s / w).min((w / s).sqrt())
            }
        }
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient and
    /// returns the gradient norm before clipping.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
        clip: Option<f64>,
    ) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::shape("Adam::step", &[store.len()], &[grads.len()]));
        }
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::State(format!(
                "non-finite gradient norm at step {}",
                self.step + 1
            )));
        }
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let n = g.len();
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); n]);
            let mut p = store.get(id).to_vec();
            for k in 0..n {
                let gk = g[k].to_f64().unwrap_or(0.0) * scale;
                let mk = b1 * m[k].to_f64().unwrap_or(0.0) + (1.0 - b1) * gk;
                let vk = b2 * v[k].to_f64().unwrap_or(0.0) + (1.0 - b2) * gk * gk;
                m[k] = cast(mk);
                v[k] = cast(vk);
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                p[k] = cast(p[k].to_f64().unwrap_or(0.0) - update);
            }
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::new(&shape, p)?)?;
        }
        Ok(norm)
    }
}
