//! The multitask network: convolutional subsampler and transformer encoder,
//! a hybrid CTC/attention ASR head, and a class-attention SLU head that
//! reads a configurable tap point.

mod config;
mod net;

pub use config::{ModelConfig, TapPoint, TapSite, Task};
pub(crate) use net::argmax;
pub use net::{Encoded, EncodedItem, ForwardOutput, Inference, Model, ASR_PREFIX, ENCODER_PREFIX, SLU_PREFIX};
