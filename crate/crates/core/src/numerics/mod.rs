//! Dense tensors and a define-by-run reverse-mode autodiff tape.
//!
//! Values live in [`Tensor`], an immutable, cheaply clonable, row-major
//! buffer that can be shared across threads. Differentiable computation
//! happens on a [`Tape`]: leaves are registered with [`Tape::leaf`], every
//! op on a [`Var`] records its backward rule, and [`Var::backward`] walks
//! the tape once in reverse to produce [`Gradients`].
//!
//! Everything is generic over [`Real`] so the same graph can be evaluated
//! in `f64` for finite-difference checks.

mod ops;
mod real;
mod tape;
mod tensor;

pub mod gradcheck;
pub mod rng;

pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use real::cast;
