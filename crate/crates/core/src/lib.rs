//! Multitask speech model engine.

pub mod data;
pub mod decode;
pub mod error;
pub mod harness;
pub mod intent;
pub mod layers;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Gradients, Real, Tape, Tensor, Var};
