//! Synthetic corpora, feature and manifest files, batching and per-class
//! subset sampling.

mod batch;
mod feat;
mod manifest;
mod synth;

pub use batch::{batch, Batch};
pub use feat::{decode_feat, encode_feat, read_feat, write_feat};
pub use manifest::{subset_per_class, Label, Manifest, Utterance, MANIFEST_FILE};
pub use synth::{char_vocab, grabo_schema, synth_generate, Grammar, SynthSpec, ALPHABET, SENTIMENT_CLASSES};
