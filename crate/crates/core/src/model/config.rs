use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intent::IntentSchema;
use crate::tokenizer::SPECIALS;

/// Which stack a [`TapPoint`] reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TapSite {
    Encoder,
    AsrDecoder,
}

/// The layer output whose hidden states feed the SLU head, written
/// `encoder.<i>` or `ASR.<i>` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TapPoint {
    pub site: TapSite,
    pub layer: usize,
}

impl TapPoint {
    pub fn encoder(layer: usize) -> Self {
        Self {
            site: TapSite::Encoder,
            layer,
        }
    }

    pub fn asr(layer: usize) -> Self {
        Self {
            site: TapSite::AsrDecoder,
            layer,
        }
    }
}

impl Default for TapPoint {
    fn default() -> Self {
        Self::asr(2)
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.site {
            TapSite::Encoder => write!(f, "encoder.{}", self.layer),
            TapSite::AsrDecoder => write!(f, "ASR.{}", self.layer),
        }
    }
}

impl FromStr for TapPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid tap point {s:?}; expected encoder.<i> or ASR.<i>"));
        let (site, index) = s.split_once('.').ok_or_else(bad)?;
        let layer = index.parse().map_err(|_| bad())?;
        match site.to_ascii_lowercase().as_str() {
            "encoder" | "enc" => Ok(Self::encoder(layer)),
            "asr" => Ok(Self::asr(layer)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for TapPoint {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TapPoint> for String {
    fn from(t: TapPoint) -> String {
        t.to_string()
    }
}

/// Downstream task served by the SLU head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Intent(IntentSchema),
    Sentiment { n_classes: usize },
}

impl Task {
    pub fn n_labels(&self) -> usize {
        match self {
            Task::Intent(schema) => schema.total_bits(),
            Task::Sentiment { n_classes } => *n_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub conv_channels: [usize; 2],
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    /// Feed-forward width inside the class-attention head.
    pub head_d_ff: usize,
    pub tap: TapPoint,
    pub task: Task,
    /// Detach the tapped states so SLU gradients stop at the tap.
    pub slu_stop_gradient: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Task::Sentiment { n_classes: 3 })
    }
}

impl ModelConfig {
    /// Small model that trains on a single CPU core in minutes.
    pub fn desk(task: Task) -> Self {
        Self {
            n_mels: 80,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            conv_channels: [16, 16],
            n_enc_layers: 4,
            n_dec_layers: 6,
            vocab_size: 32,
            head_d_ff: 128,
            tap: TapPoint::default(),
            task,
            slu_stop_gradient: false,
        }
    }

    /// Full-size architecture: 12 encoder layers at width 256 and a
    /// 5000-unit output inventory.
    pub fn paper(task: Task) -> Self {
        Self {
            n_mels: 80,
            d_model: 256,
            n_heads: 4,
            d_ff: 2048,
            conv_channels: [256, 256],
            n_enc_layers: 12,
            n_dec_layers: 6,
            vocab_size: 5000,
            head_d_ff: 1024,
            tap: TapPoint::default(),
            task,
            slu_stop_gradient: false,
        }
    }

    pub fn with_tap(mut self, tap: TapPoint) -> Self {
        self.tap = tap;
        self
    }

    pub fn n_labels(&self) -> usize {
        self.task.n_labels()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("n_mels", self.n_mels),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("head_d_ff", self.head_d_ff),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("conv_channels[0]", self.conv_channels[0]),
            ("conv_channels[1]", self.conv_channels[1]),
        ] {
            if v == 0 {
                return fail(format!("model.{name} must be positive"));
            }
        }
        if self.n_mels < 4 {
            return fail(format!(
                "model.n_mels = {} is below the subsampler minimum of 4",
                self.n_mels
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "model.d_model = {} is not divisible by n_heads = {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size <= SPECIALS.len() {
            return fail(format!(
                "model.vocab_size = {} leaves no room beyond the {} special symbols",
                self.vocab_size,
                SPECIALS.len()
            ));
        }
        let layers = match self.tap.site {
            TapSite::Encoder => self.n_enc_layers,
            TapSite::AsrDecoder => self.n_dec_layers,
        };
        if self.tap.layer >= layers {
            return fail(format!(
                "tap {} does not exist ({} layers at that site)",
                self.tap, layers
            ));
        }
        match &self.task {
            Task::Intent(schema) => schema.validate(),
            Task::Sentiment { n_classes } if *n_classes < 2 => {
                fail(format!("sentiment task needs at least 2 classes, got {n_classes}"))
            }
            Task::Sentiment { .. } => Ok(()),
        }
    }
}
