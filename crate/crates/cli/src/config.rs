use std::path::Path;

use mtslu::data::SynthSpec;
use mtslu::harness::HarnessConfig;
use mtslu::model::{ModelConfig, TapPoint, Task};
use mtslu::training::{config_hash, TrainConfig};
use mtslu::{Error, Result};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters; the task lives in its own section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_mels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub conv_channels: [usize; 2],
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    pub head_d_ff: usize,
    pub tap: TapPoint,
    pub slu_stop_gradient: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(Task::Sentiment { n_classes: 3 });
        Self {
            n_mels: d.n_mels,
            d_model: d.d_model,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            conv_channels: d.conv_channels,
            n_enc_layers: d.n_enc_layers,
            n_dec_layers: d.n_dec_layers,
            vocab_size: d.vocab_size,
            head_d_ff: d.head_d_ff,
            tap: d.tap,
            slu_stop_gradient: d.slu_stop_gradient,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Corpus synthesised for pretraining when no manifest is given.
    pub pretrain: SynthSpec,
    pub pretrain_utterances: usize,
    /// Utterances held out from the pretraining manifest for model selection.
    pub pretrain_val: usize,
    /// Downstream corpus synthesised for `curve` and `ablation`.
    pub downstream: SynthSpec,
    /// Seed of the downstream test corpus.
    pub test_seed: u64,
    pub test_per_class: usize,
    /// Per-class validation examples held out by `train`.
    pub val_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            pretrain: SynthSpec::asr_pretrain(1),
            pretrain_utterances: 600,
            pretrain_val: 40,
            downstream: SynthSpec::grabo(11),
            test_seed: 12,
            test_per_class: 3,
            val_per_class: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default)]
    pub harness: HarnessConfig,
}

fn default_task() -> Task {
    Task::Intent(mtslu::data::grabo_schema())
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            task: default_task(),
            harness: HarnessConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads, applies the seed override and validates.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed {
            config.train.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_mels: m.n_mels,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            conv_channels: m.conv_channels,
            n_enc_layers: m.n_enc_layers,
            n_dec_layers: m.n_dec_layers,
            vocab_size: m.vocab_size,
            head_d_ff: m.head_d_ff,
            tap: m.tap,
            task: self.task.clone(),
            slu_stop_gradient: m.slu_stop_gradient,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_config();
        model.validate()?;
        self.train.validate()?;
        self.harness.validate(&model)?;
        self.data.pretrain.validate()?;
        self.data.downstream.validate()?;
        for spec in [&self.data.pretrain, &self.data.downstream] {
            if spec.n_mels != model.n_mels {
                return Err(Error::Config(format!(
                    "data spec renders {} mel bins but model.n_mels is {}",
                    spec.n_mels, model.n_mels
                )));
            }
        }
        if self.data.test_per_class == 0 || self.data.pretrain_utterances <= self.data.pretrain_val {
            return Err(Error::Config(
                "data.test_per_class must be positive and pretrain_utterances must exceed pretrain_val".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}
