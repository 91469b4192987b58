//! Training objectives: CTC, label-smoothed cross-entropy, multi-hot BCE
//! and their weighted multitask combination.

mod bce;
mod ce;
mod ctc;
mod joint;

pub use bce::multihot_bce;
pub use ce::smoothed_ce;
pub use ctc::{ctc_loss, ctc_loss_batch, ctc_min_frames};
pub use joint::{joint_loss, LossBreakdown, LossWeights};

#[cfg(test)]
mod tests;
