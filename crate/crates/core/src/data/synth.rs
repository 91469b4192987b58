use serde::{Deserialize, Serialize};

use super::manifest::{Label, Manifest, Utterance};
use crate::error::{Error, Result};
use crate::intent::{ArgumentGroup, IntentSchema};
use crate::layers::subsampled_len;
use crate::losses::ctc_min_frames;
use crate::numerics::rng::Rng;
use crate::numerics::Tensor;
use crate::tokenizer::{Vocab, SPECIALS};

/// Characters the synthesiser can render.
pub const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz";

/// Sentiment classes in label order.
pub const SENTIMENT_CLASSES: [&str; 3] = ["positive", "negative", "neutral"];

/// Character vocabulary covering every synthetic transcript.
pub fn char_vocab() -> Vocab {
    let symbols = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(ALPHABET.chars().map(String::from))
        .collect();
    Vocab::from_symbols(symbols).expect("fixed alphabet is valid")
}

/// What the generated utterances say.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grammar {
    /// One transcript per intent combination. `template` names the slots
    /// `{action}` and `{<argument group>}`; each slot is replaced by the
    /// value's name (`none` renders as nothing).
    Intent { schema: IntentSchema, template: String },
    /// `{word}` in a random template is filled from the class lexicon.
    Sentiment {
        templates: Vec<String>,
        positive: Vec<String>,
        negative: Vec<String>,
        neutral: Vec<String>,
    },
    /// Unlabelled random word sequences for ASR pretraining.
    Asr {
        words: Vec<String>,
        min_words: usize,
        max_words: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Seed for the per-symbol prototypes and speaker voices. Corpora that
    /// share it sound alike.
    pub acoustic_seed: u64,
    pub grammar: Grammar,
    pub speakers: usize,
    /// Speaker ids run from `first_speaker` upwards, so disjoint ranges
    /// give disjoint voices.
    pub first_speaker: usize,
    pub speaker_spread: f64,
    /// Per-speaker tempo factor range.
    pub tempo: [f64; 2],
    pub frames_per_symbol: [usize; 2],
    pub edge_silence: [usize; 2],
    pub noise_sigma: f64,
    pub n_mels: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::grabo(0)
    }
}

/// 4 actions × 3 colours × 3 speeds = 36 commands.
pub fn grabo_schema() -> IntentSchema {
    let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    IntentSchema {
        actions: strings(&["go", "turn", "grab", "drop"]),
        arguments: vec![
            ArgumentGroup {
                name: "color".into(),
                values: strings(&["red", "blue", "green"]),
            },
            ArgumentGroup {
                name: "speed".into(),
                values: strings(&["slow", "fast", "now"]),
            },
        ],
    }
}

impl SynthSpec {
    fn base(seed: u64, grammar: Grammar) -> Self {
        Self {
            seed,
            acoustic_seed: 7,
            grammar,
            speakers: 8,
            first_speaker: 100,
            speaker_spread: 0.4,
            tempo: [0.85, 1.15],
            frames_per_symbol: [4, 8],
            edge_silence: [2, 6],
            noise_sigma: 0.6,
            n_mels: 80,
        }
    }

    /// Spoken-command corpus with the 36-class schema.
    pub fn grabo(seed: u64) -> Self {
        Self::base(
            seed,
            Grammar::Intent {
                schema: grabo_schema(),
                template: "{action} {color} {speed}".into(),
            },
        )
    }

    /// Three-way sentiment corpus.
    pub fn sentiment(seed: u64) -> Self {
        let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self::base(
            seed,
            Grammar::Sentiment {
                templates: strings(&["it was {word}", "so {word} today", "the food is {word}"]),
                positive: strings(&["good", "great", "nice", "happy"]),
                negative: strings(&["bad", "awful", "sad", "poor"]),
                neutral: strings(&["okay", "plain", "usual", "normal"]),
            },
        )
    }

    /// Pretraining corpus: random word strings over a lexicon that covers
    /// the command words, read by speakers disjoint from the downstream
    /// corpora.
    pub fn asr_pretrain(seed: u64) -> Self {
        let words = [
            "go", "turn", "grab", "drop", "red", "blue", "green", "slow", "fast", "now", "left", "right", "up", "down",
            "stop", "move", "block", "ball", "big", "small", "the", "a", "on", "off", "open", "door", "light", "yes",
            "no", "one", "two", "three", "four", "five", "good", "bad", "it", "was", "so", "today", "food", "is",
            "great", "nice", "happy", "awful", "sad", "poor", "okay", "plain", "usual", "normal", "very", "quick",
        ];
        Self {
            speakers: 12,
            first_speaker: 0,
            ..Self::base(
                seed,
                Grammar::Asr {
                    words: words.iter().map(|s| s.to_string()).collect(),
                    min_words: 1,
                    max_words: 4,
                },
            )
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.speakers == 0 || self.n_mels == 0 {
            return fail("synth spec needs at least one speaker and one mel bin".into());
        }
        if self.frames_per_symbol[0] == 0 || self.frames_per_symbol[0] > self.frames_per_symbol[1] {
            return fail(format!("bad frames_per_symbol range {:?}", self.frames_per_symbol));
        }
        if self.edge_silence[0] > self.edge_silence[1] {
            return fail(format!("bad edge_silence range {:?}", self.edge_silence));
        }
        if !(self.tempo[0] > 0.0 && self.tempo[0] <= self.tempo[1]) {
            return fail(format!("bad tempo range {:?}", self.tempo));
        }
        if self.noise_sigma < 0.0 || self.speaker_spread < 0.0 {
            return fail("noise_sigma and speaker_spread must be non-negative".into());
        }
        let words: Vec<&String> = match &self.grammar {
            Grammar::Intent { schema, template } => {
                schema.validate()?;
                if template.trim().is_empty() {
                    return fail("intent template is empty".into());
                }
                schema
                    .actions
                    .iter()
                    .chain(schema.arguments.iter().flat_map(|g| &g.values))
                    .collect()
            }
            Grammar::Sentiment {
                templates,
                positive,
                negative,
                neutral,
            } => {
                if templates.is_empty() || [positive, negative, neutral].iter().any(|l| l.is_empty()) {
                    return fail("sentiment grammar needs templates and three non-empty lexicons".into());
                }
                templates
                    .iter()
                    .chain(positive)
                    .chain(negative)
                    .chain(neutral)
                    .collect()
            }
            Grammar::Asr {
                words,
                min_words,
                max_words,
            } => {
                if words.is_empty() || *min_words == 0 || min_words > max_words {
                    return fail("ASR grammar needs words and 1 <= min_words <= max_words".into());
                }
                words.iter().collect()
            }
        };
        if let Some(w) = words.iter().find(|w| {
            w.chars()
                .any(|c| !ALPHABET.contains(c) && c != '{' && c != '}' && c != '_')
        }) {
            return fail(format!("{w:?} contains characters outside [a-z ]"));
        }
        Ok(())
    }

    /// Number of label classes the grammar defines (0 for ASR corpora).
    pub fn n_classes(&self) -> usize {
        match &self.grammar {
            Grammar::Intent { schema, .. } => schema.n_classes(),
            Grammar::Sentiment { .. } => SENTIMENT_CLASSES.len(),
            Grammar::Asr { .. } => 0,
        }
    }

    pub fn schema(&self) -> Option<&IntentSchema> {
        match &self.grammar {
            Grammar::Intent { schema, .. } => Some(schema),
            _ => None,
        }
    }
}

fn tidy(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders `n_per_class` utterances for every class; ASR grammars have no
/// classes and yield `n_per_class` utterances in total.
pub fn synth_generate(spec: &SynthSpec, n_per_class: usize) -> Result<Manifest> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let synth = Synthesizer::new(spec);
    let mut utterances = Vec::new();
    match &spec.grammar {
        Grammar::Intent { schema, template } => {
            for (class, intent) in schema.all_intents().enumerate() {
                let mut text = template.replace("{action}", &schema.actions[intent.action]);
                for (group, &v) in schema.arguments.iter().zip(&intent.args) {
                    let value = &group.values[v];
                    let spoken = if value == "none" { "" } else { value.as_str() };
                    text = text.replace(&format!("{{{}}}", group.name), spoken);
                }
                let text = tidy(&text);
                for rep in 0..n_per_class {
                    let id = format!("int{class:03}-{rep:03}");
                    utterances.push(synth.render(&id, &text, Label::Intent(intent.clone()))?);
                }
            }
        }
        Grammar::Sentiment {
            templates,
            positive,
            negative,
            neutral,
        } => {
            for (class, lexicon) in [positive, negative, neutral].into_iter().enumerate() {
                for rep in 0..n_per_class {
                    let id = format!("sen{class}-{rep:04}");
                    let mut rng = Rng::stream(spec.seed, &format!("text/{id}"));
                    let template = &templates[rng.int_range(0, templates.len() - 1)];
                    let word = &lexicon[rng.int_range(0, lexicon.len() - 1)];
                    let text = tidy(&template.replace("{word}", word));
                    utterances.push(synth.render(&id, &text, Label::Sentiment(class))?);
                }
            }
        }
        Grammar::Asr {
            words,
            min_words,
            max_words,
        } => {
            for i in 0..n_per_class {
                let id = format!("asr{i:05}");
                let mut rng = Rng::stream(spec.seed, &format!("text/{id}"));
                let n = rng.int_range(*min_words, *max_words);
                let text = (0..n)
                    .map(|_| words[rng.int_range(0, words.len() - 1)].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                utterances.push(synth.render(&id, &text, Label::None)?);
            }
        }
    }
    Ok(Manifest::new(utterances))
}

struct Synthesizer<'a> {
    spec: &'a SynthSpec,
    vocab: Vocab,
    /// One prototype frame per alphabet symbol.
    prototypes: Vec<Vec<f32>>,
}

impl<'a> Synthesizer<'a> {
    fn new(spec: &'a SynthSpec) -> Self {
        let prototypes = ALPHABET
            .chars()
            .map(|c| {
                let mut rng = Rng::stream(spec.acoustic_seed, &format!("prototype/{c}"));
                let gain = if c == ' ' { 0.3 } else { 1.0 };
                (0..spec.n_mels).map(|_| (gain * rng.normal()) as f32).collect()
            })
            .collect();
        Self {
            spec,
            vocab: char_vocab(),
            prototypes,
        }
    }

    fn render(&self, id: &str, text: &str, label: Label) -> Result<Utterance> {
        let spec = self.spec;
        let mels = spec.n_mels;
        let mut rng = Rng::stream(spec.seed, &format!("audio/{id}"));
        let speaker = spec.first_speaker + rng.int_range(0, spec.speakers - 1);
        let mut voice = Rng::stream(spec.acoustic_seed, &format!("speaker/{speaker}"));
        let tempo = voice.uniform(spec.tempo[0], spec.tempo[1]);
        let offset: Vec<f32> = (0..mels)
            .map(|_| (spec.speaker_spread * voice.normal()) as f32)
            .collect();

        // Frame plan: symbol index (None = silence) and whether the frame
        // starts a new symbol.
        let mut plan: Vec<(Option<usize>, bool)> = Vec::new();
        let push = |plan: &mut Vec<(Option<usize>, bool)>, sym: Option<usize>, n: usize| {
            plan.extend((0..n).map(|k| (sym, k == 0)));
        };
        // Timing belongs to the speaker and the words; repetitions of a
        // phrase differ only in noise.
        let mut timing = Rng::stream(spec.seed, &format!("timing/{speaker}/{text}"));
        let lead = timing.int_range(spec.edge_silence[0], spec.edge_silence[1]);
        push(&mut plan, None, lead);
        for c in text.chars() {
            let idx = ALPHABET
                .find(c)
                .ok_or_else(|| Error::Data(format!("{c:?} in {text:?} cannot be rendered")))?;
            let base = timing.int_range(spec.frames_per_symbol[0], spec.frames_per_symbol[1]) as f64;
            let n = ((base * tempo).round() as usize).max(spec.frames_per_symbol[0]);
            push(&mut plan, Some(idx), n);
        }
        let trail = timing.int_range(spec.edge_silence[0], spec.edge_silence[1]);
        push(&mut plan, None, trail);
        let needed = ctc_min_frames(&self.vocab.encode(text));
        while plan.len() < 4 || subsampled_len(plan.len()) < needed {
            push(&mut plan, None, 1);
        }

        let silence = vec![0f32; mels];
        let frame = |sym: Option<usize>| sym.map_or(silence.as_slice(), |i| self.prototypes[i].as_slice());
        let mut data = Vec::with_capacity(plan.len() * mels);
        for (t, &(sym, onset)) in plan.iter().enumerate() {
            let cur = frame(sym);
            // A symbol's first frame blends with the one before it.
            let prev = (t > 0 && onset).then(|| frame(plan[t - 1].0));
            for d in 0..mels {
                let clean = prev.map_or(cur[d], |p| 0.5 * (p[d] + cur[d]));
                data.push(clean + offset[d] + (spec.noise_sigma * rng.normal()) as f32);
            }
        }
        Ok(Utterance {
            id: id.to_string(),
            features: Tensor::new(&[plan.len(), mels], data)?,
            transcript: text.to_string(),
            speaker,
            label,
        })
    }
}
