use crate::error::{Error, Result};
use crate::layers::{
    sinusoidal_positions, Binder, ClassAttention, ConvSubsampler, DecoderLayer, EncoderLayer, LayerNorm, Linear,
    ParamId, ParamStore, Scope,
};
use crate::numerics::{cast, Real, Tape, Tensor, Var};
use crate::tokenizer::{BLANK, EOS, PAD, SOS};

use super::config::{ModelConfig, TapSite};

/// Encoder pass over a padded batch.
pub struct Encoded<'t, T: Real> {
    /// Final encoder states `[B, T', d]` after the closing layer norm.
    pub memory: Var<'t, T>,
    pub lengths: Vec<usize>,
    /// Tapped encoder states when the tap sits in the encoder.
    pub tap: Option<Var<'t, T>>,
}

/// Output of a teacher-forced forward pass.
pub struct ForwardOutput<'t, T: Real> {
    /// `[B, T', V]`
    pub ctc_log_probs: Var<'t, T>,
    pub ctc_lengths: Vec<usize>,
    /// `[B, U, V]` for decoder inputs `<sos> y`.
    pub dec_logits: Var<'t, T>,
    pub dec_lengths: Vec<usize>,
    /// `[B, n_labels]`
    pub slu_logits: Var<'t, T>,
    /// `[B, L, d]` states read by the SLU head.
    pub tapped: Var<'t, T>,
    pub tapped_lengths: Vec<usize>,
}

/// Encoder results for one unpadded utterance, detached from any tape.
#[derive(Clone, Debug)]
pub struct EncodedItem<T: Real = f32> {
    /// `[T', d]`
    pub memory: Tensor<T>,
    /// `[T', d]` when the tap sits in the encoder.
    pub tap: Option<Tensor<T>>,
    /// `[T', V]`
    pub ctc_log_probs: Tensor<T>,
}

/// Result of greedy inference on one utterance.
#[derive(Clone, Debug)]
pub struct Inference<T: Real = f32> {
    pub tokens: Vec<usize>,
    pub slu_logits: Vec<T>,
    pub ctc_log_probs: Tensor<T>,
}

struct DecoderRun<'t, T: Real> {
    logits: Var<'t, T>,
    lengths: Vec<usize>,
    tap: Option<Var<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    subsampler: ConvSubsampler,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    ctc_out: Linear,
    embed: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    dec_out: Linear,
    slu: ClassAttention,
}

/// Parameter name prefixes of the three parts of the network.
pub const ENCODER_PREFIX: &str = "encoder.";
pub const ASR_PREFIX: &str = "asr.";
pub const SLU_PREFIX: &str = "slu.";

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut params = ParamStore::new();
        let mut root = Scope::root(&mut params, seed);
        let (subsampler, encoder, enc_norm) = {
            let mut enc = root.sub("encoder");
            let subsampler = ConvSubsampler::new(
                &mut enc.sub("subsampler"),
                c.n_mels,
                (c.conv_channels[0], c.conv_channels[1]),
                c.d_model,
            )?;
            let layers = (0..c.n_enc_layers)
                .map(|i| EncoderLayer::new(&mut enc.sub(&format!("layers.{i}")), c.d_model, c.n_heads, c.d_ff))
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(&mut enc.sub("norm"), c.d_model)?;
            (subsampler, layers, norm)
        };
        let (ctc_out, embed, decoder, dec_norm, dec_out) = {
            let mut asr = root.sub("asr");
            let ctc_out = Linear::new(&mut asr.sub("ctc"), c.d_model, c.vocab_size)?;
            let embed = asr.uniform("embed", &[c.vocab_size, c.d_model], (1.0 / c.d_model as f64).sqrt())?;
            let layers = (0..c.n_dec_layers)
                .map(|i| DecoderLayer::new(&mut asr.sub(&format!("layers.{i}")), c.d_model, c.n_heads, c.d_ff))
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(&mut asr.sub("norm"), c.d_model)?;
            let out = Linear::new(&mut asr.sub("out"), c.d_model, c.vocab_size)?;
            (ctc_out, embed, layers, norm, out)
        };
        let slu = ClassAttention::new(&mut root.sub("slu"), c.d_model, c.n_heads, c.head_d_ff, c.n_labels())?;
        Ok(Self {
            config,
            params,
            subsampler,
            encoder,
            enc_norm,
            ctc_out,
            embed,
            decoder,
            dec_norm,
            dec_out,
            slu,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// The same weights read through a different tap point.
    pub fn with_tap(&self, tap: super::TapPoint) -> Result<Self> {
        let config = self.config.clone().with_tap(tap);
        config.validate()?;
        Ok(Self { config, ..self.clone() })
    }

    /// Scalar parameter count under a name prefix (`""` for everything).
    pub fn count_params(&self, prefix: &str) -> usize {
        self.params.count(prefix)
    }

    /// Freezes or unfreezes every encoder parameter.
    pub fn set_encoder_trainable(&mut self, trainable: bool) {
        self.params.set_trainable_prefix(ENCODER_PREFIX, trainable);
    }

    /// Redraws the SLU head from a fresh seed, leaving everything else.
    pub fn reinit_slu(&mut self, seed: u64) -> Result<()> {
        let fresh = Self::new(self.config.clone(), seed)?;
        for id in self.params.ids().collect::<Vec<_>>() {
            if self.params.name(id).starts_with(SLU_PREFIX) {
                let value = fresh.params.get(id).clone();
                self.params.set(id, value)?;
            }
        }
        Ok(())
    }

    pub fn encode<'t>(&self, b: &Binder<'t, '_, T>, features: &Tensor<T>, lengths: &[usize]) -> Result<Encoded<'t, T>> {
        let x = b.constant(features.clone());
        let (mut h, lengths) = self.subsampler.forward(b, &x, lengths)?;
        let last = self.encoder.len() - 1;
        let tap_layer = (self.config.tap.site == TapSite::Encoder).then_some(self.config.tap.layer);
        let mut tap = None;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(b, &h, &lengths)?;
            if tap_layer == Some(i) && i != last {
                tap = Some(h.clone());
            }
        }
        let memory = self.enc_norm.forward(b, &h)?;
        if tap_layer == Some(last) {
            tap = Some(memory.clone());
        }
        Ok(Encoded { memory, lengths, tap })
    }

    fn ctc_log_probs<'t>(&self, b: &Binder<'t, '_, T>, memory: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.ctc_out.forward(b, memory)?.log_softmax(2)
    }

    /// Runs the decoder over `inputs` (each starting with `<sos>`), padded
    /// with `<pad>`.
    fn run_decoder<'t>(
        &self,
        b: &Binder<'t, '_, T>,
        memory: &Var<'t, T>,
        memory_lengths: &[usize],
        inputs: &[Vec<usize>],
    ) -> Result<DecoderRun<'t, T>> {
        let batch = inputs.len();
        let d = self.config.d_model;
        let lengths: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let width = *lengths
            .iter()
            .max()
            .ok_or_else(|| Error::contract("empty decoder batch"))?;
        let ids: Vec<usize> = inputs
            .iter()
            .flat_map(|seq| seq.iter().copied().chain(std::iter::repeat(PAD)).take(width))
            .collect();
        let positions = b.constant(sinusoidal_positions(width, d));
        let mut h = b
            .param(self.embed)
            .embedding(&ids)?
            .reshape(&[batch, width, d])?
            .scale(cast((d as f64).sqrt()))
            .add(&positions)?;
        let last = self.decoder.len() - 1;
        let tap_layer = (self.config.tap.site == TapSite::AsrDecoder).then_some(self.config.tap.layer);
        let mut tap = None;
        for (i, layer) in self.decoder.iter().enumerate() {
            h = layer.forward(b, &h, &lengths, memory, memory_lengths)?;
            if tap_layer == Some(i) && i != last {
                tap = Some(h.clone());
            }
        }
        let normed = self.dec_norm.forward(b, &h)?;
        if tap_layer == Some(last) {
            tap = Some(normed.clone());
        }
        Ok(DecoderRun {
            logits: self.dec_out.forward(b, &normed)?,
            lengths,
            tap,
        })
    }

    fn slu_from<'t>(&self, b: &Binder<'t, '_, T>, tapped: &Var<'t, T>, lengths: &[usize]) -> Result<Var<'t, T>> {
        let input = if self.config.slu_stop_gradient {
            tapped.detach()
        } else {
            tapped.clone()
        };
        self.slu.forward(b, &input, lengths)
    }

    /// Teacher-forced pass: the decoder sees `<sos> y` for each transcript
    /// `y` (token ids without specials).
    pub fn forward_train<'t>(
        &self,
        b: &Binder<'t, '_, T>,
        features: &Tensor<T>,
        feat_lengths: &[usize],
        transcripts: &[Vec<usize>],
    ) -> Result<ForwardOutput<'t, T>> {
        let encoded = self.encode(b, features, feat_lengths)?;
        self.forward_from_encoded(b, &encoded, transcripts)
    }

    pub fn forward_from_encoded<'t>(
        &self,
        b: &Binder<'t, '_, T>,
        encoded: &Encoded<'t, T>,
        transcripts: &[Vec<usize>],
    ) -> Result<ForwardOutput<'t, T>> {
        if transcripts.len() != encoded.lengths.len() {
            return Err(Error::shape(
                "forward transcripts",
                &[encoded.lengths.len()],
                &[transcripts.len()],
            ));
        }
        if let Some(i) = transcripts.iter().position(Vec::is_empty) {
            return Err(Error::contract(format!("empty target transcript for batch item {i}")));
        }
        let inputs: Vec<Vec<usize>> = transcripts
            .iter()
            .map(|y| std::iter::once(SOS).chain(y.iter().copied()).collect())
            .collect();
        let run = self.run_decoder(b, &encoded.memory, &encoded.lengths, &inputs)?;
        let (tapped, tapped_lengths) = match (&encoded.tap, run.tap) {
            (Some(t), _) => (t.clone(), encoded.lengths.clone()),
            (None, Some(t)) => (t, run.lengths.clone()),
            (None, None) => return Err(Error::State("tap point produced no states".into())),
        };
        Ok(ForwardOutput {
            ctc_log_probs: self.ctc_log_probs(b, &encoded.memory)?,
            ctc_lengths: encoded.lengths.clone(),
            dec_logits: run.logits,
            dec_lengths: run.lengths,
            slu_logits: self.slu_from(b, &tapped, &tapped_lengths)?,
            tapped,
            tapped_lengths,
        })
    }

    /// Encodes one unpadded utterance `[T, n_mels]` without gradients.
    pub fn encode_item(&self, features: &Tensor<T>) -> Result<EncodedItem<T>> {
        let shape = features.shape();
        if shape.len() != 2 {
            return Err(Error::shape("encode_item", shape, &[0, self.config.n_mels]));
        }
        let tape = Tape::new();
        let b = Binder::inference(&tape, &self.params);
        let batched = features.reshape(&[1, shape[0], shape[1]])?;
        let enc = self.encode(&b, &batched, &[shape[0]])?;
        let frames = enc.lengths[0];
        let d = self.config.d_model;
        let squeeze = |v: &Var<'_, T>, width: usize| v.value().reshape(&[frames, width]);
        Ok(EncodedItem {
            memory: squeeze(&enc.memory, d)?,
            tap: enc.tap.as_ref().map(|t| squeeze(t, d)).transpose()?,
            ctc_log_probs: squeeze(&self.ctc_log_probs(&b, &enc.memory)?, self.config.vocab_size)?,
        })
    }

    /// Stacks per-utterance encoder results into a padded batch on `b`'s tape.
    pub fn batch_encoded<'t>(&self, b: &Binder<'t, '_, T>, items: &[&EncodedItem<T>]) -> Result<Encoded<'t, T>> {
        let lengths: Vec<usize> = items.iter().map(|it| it.memory.shape()[0]).collect();
        let memory = b.constant(pad_stack(items.iter().map(|it| &it.memory), &lengths)?);
        let tap = match items.first().and_then(|it| it.tap.as_ref()) {
            Some(_) => {
                let taps = items
                    .iter()
                    .map(|it| {
                        it.tap
                            .as_ref()
                            .ok_or_else(|| Error::State("encoder tap missing".into()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(b.constant(pad_stack(taps.into_iter(), &lengths)?))
            }
            None => None,
        };
        Ok(Encoded { memory, lengths, tap })
    }

    /// Next-token log-distributions after each prefix (each starting with
    /// `<sos>`). Blank, pad and sos are excluded from the distribution.
    pub fn next_token_log_probs(&self, item: &EncodedItem<T>, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let b = Binder::inference(&tape, &self.params);
        let memory = b.constant(repeat_item(&item.memory, prefixes.len())?);
        let mem_lengths = vec![item.memory.shape()[0]; prefixes.len()];
        let run = self.run_decoder(&b, &memory, &mem_lengths, prefixes)?;
        let (width, vocab) = (run.logits.shape()[1], self.config.vocab_size);
        let data = run.logits.value().data();
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let at = (i * width + p.len() - 1) * vocab;
                masked_log_softmax(&data[at..at + vocab])
            })
            .collect())
    }

    /// Greedy autoregressive decoding; stops at `<eos>` or after `max_len`
    /// tokens. The returned tokens exclude `<eos>`.
    pub fn greedy(&self, item: &EncodedItem<T>, max_len: usize) -> Result<Vec<usize>> {
        if max_len < 1 {
            return Err(Error::contract("max_decode_len must be at least 1"));
        }
        let mut prefix = vec![SOS];
        for _ in 0..max_len {
            let logp = self.next_token_log_probs(item, std::slice::from_ref(&prefix))?;
            let next = argmax(&logp[0]);
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        prefix.remove(0);
        Ok(prefix)
    }

    /// SLU logits for one utterance given its decoded hypothesis. Decoder
    /// taps read the states of `<sos> hyp`; encoder taps ignore `hyp`.
    pub fn slu_logits(&self, item: &EncodedItem<T>, hyp: &[usize]) -> Result<Vec<T>> {
        let tape = Tape::new();
        let b = Binder::inference(&tape, &self.params);
        let frames = item.memory.shape()[0];
        let d = self.config.d_model;
        let logits = match &item.tap {
            Some(tap) => self
                .slu
                .forward(&b, &b.constant(tap.reshape(&[1, frames, d])?), &[frames])?,
            None => {
                let memory = b.constant(item.memory.reshape(&[1, frames, d])?);
                let input: Vec<usize> = std::iter::once(SOS).chain(hyp.iter().copied()).collect();
                let run = self.run_decoder(&b, &memory, &[frames], &[input])?;
                let tap = run.tap.ok_or_else(|| Error::State("decoder tap missing".into()))?;
                self.slu.forward(&b, &tap, &run.lengths)?
            }
        };
        Ok(logits.value().to_vec())
    }

    /// Greedy transcript plus SLU logits for each utterance of a padded
    /// batch `[B, T, n_mels]`.
    pub fn forward_infer(
        &self,
        features: &Tensor<T>,
        feat_lengths: &[usize],
        max_decode_len: usize,
    ) -> Result<Vec<Inference<T>>> {
        let shape = features.shape();
        if shape.len() != 3 || feat_lengths.len() != shape[0] || feat_lengths.iter().any(|&l| l > shape[1]) {
            return Err(Error::shape("forward_infer", shape, feat_lengths));
        }
        let (frames, mels) = (shape[1], shape[2]);
        feat_lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let start = i * frames * mels;
                let item = Tensor::new(
                    &[len.max(1), mels],
                    features.data()[start..start + len.max(1) * mels].to_vec(),
                )?;
                let encoded = self.encode_item(&item)?;
                let tokens = self.greedy(&encoded, max_decode_len)?;
                let slu_logits = self.slu_logits(&encoded, &tokens)?;
                Ok(Inference {
                    tokens,
                    slu_logits,
                    ctc_log_probs: encoded.ctc_log_probs,
                })
            })
            .collect()
    }
}

/// Zero-pads `[T_i, d]` tensors to a `[B, max T_i, d]` batch.
fn pad_stack<'a, T: Real>(items: impl Iterator<Item = &'a Tensor<T>>, lengths: &[usize]) -> Result<Tensor<T>> {
    let width = lengths
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::contract("empty batch"))?;
    let mut data = Vec::new();
    let mut d = 0;
    for (item, &len) in items.zip(lengths) {
        d = item.shape()[1];
        data.extend_from_slice(item.data());
        data.resize(data.len() + (width - len) * d, T::zero());
    }
    Tensor::new(&[lengths.len(), width, d], data)
}

fn repeat_item<T: Real>(x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let mut shape = vec![n];
    shape.extend_from_slice(x.shape());
    let mut data = Vec::with_capacity(n * x.numel());
    for _ in 0..n {
        data.extend_from_slice(x.data());
    }
    Tensor::new(&shape, data)
}

fn masked_log_softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let masked: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if matches!(i, BLANK | PAD | SOS) {
                f64::NEG_INFINITY
            } else {
                v.to_f64().unwrap_or(f64::NAN)
            }
        })
        .collect();
    let max = masked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + masked.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    masked.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
