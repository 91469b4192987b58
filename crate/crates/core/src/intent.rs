//! Multi-hot intent encoding: one one-hot block for the action followed by
//! one block per argument group.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArgumentGroup {
    pub name: String,
    pub values: Vec<String>,
}

/// Actions plus argument groups. Optional arguments are modelled with an
/// explicit `"none"` value in their group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentSchema {
    pub actions: Vec<String>,
    #[serde(default)]
    pub arguments: Vec<ArgumentGroup>,
}

/// A structured intent as indices into the schema.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Intent {
    pub action: usize,
    pub args: Vec<usize>,
}

/// Concatenated one-hot blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntentVector {
    pub bits: Vec<u8>,
}

impl IntentSchema {
    pub fn validate(&self) -> Result<()> {
        if self.actions.is_empty() {
            return Err(Error::Config("intent schema needs at least one action".into()));
        }
        if let Some(g) = self.arguments.iter().find(|g| g.values.is_empty()) {
            return Err(Error::Config(format!("argument group {:?} has no values", g.name)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let schema: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn total_bits(&self) -> usize {
        self.actions.len() + self.arguments.iter().map(|g| g.values.len()).sum::<usize>()
    }

    /// Bit ranges: the action block first, then one block per group.
    pub fn blocks(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        std::iter::once(self.actions.len())
            .chain(self.arguments.iter().map(|g| g.values.len()))
            .map(|len| {
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }

    /// Number of distinct full intents (action × every argument value).
    pub fn n_classes(&self) -> usize {
        self.actions.len() * self.arguments.iter().map(|g| g.values.len()).product::<usize>()
    }

    /// Mixed-radix class id, action most significant.
    pub fn class_of(&self, intent: &Intent) -> usize {
        self.arguments
            .iter()
            .zip(&intent.args)
            .fold(intent.action, |acc, (g, &v)| acc * g.values.len() + v)
    }

    pub fn intent_of_class(&self, mut class: usize) -> Intent {
        let mut args = vec![0; self.arguments.len()];
        for (slot, g) in args.iter_mut().zip(&self.arguments).rev() {
            *slot = class % g.values.len();
            class /= g.values.len();
        }
        Intent { action: class, args }
    }

    /// Every intent, in class-id order.
    pub fn all_intents(&self) -> impl Iterator<Item = Intent> + '_ {
        (0..self.n_classes()).map(|c| self.intent_of_class(c))
    }

    /// Resolves names to an [`Intent`]; `args` lists one value per group in
    /// schema order.
    pub fn intent(&self, action: &str, args: &[&str]) -> Result<Intent> {
        let action = self
            .actions
            .iter()
            .position(|a| a == action)
            .ok_or_else(|| Error::Data(format!("unknown action {action:?}")))?;
        if args.len() != self.arguments.len() {
            return Err(Error::Data(format!(
                "expected {} argument values, got {}",
                self.arguments.len(),
                args.len()
            )));
        }
        let args = self
            .arguments
            .iter()
            .zip(args)
            .map(|(g, v)| {
                g.values
                    .iter()
                    .position(|x| x == v)
                    .ok_or_else(|| Error::Data(format!("unknown value {v:?} for argument {:?}", g.name)))
            })
            .collect::<Result<_>>()?;
        Ok(Intent { action, args })
    }

    pub fn check(&self, intent: &Intent) -> Result<()> {
        let ok = intent.action < self.actions.len()
            && intent.args.len() == self.arguments.len()
            && intent
                .args
                .iter()
                .zip(&self.arguments)
                .all(|(&v, g)| v < g.values.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("intent {intent:?} does not fit the schema")))
        }
    }

    pub fn describe(&self, intent: &Intent) -> String {
        let mut out = self.actions.get(intent.action).cloned().unwrap_or_default();
        for (g, &v) in self.arguments.iter().zip(&intent.args) {
            out.push_str(&format!(" {}={}", g.name, g.values.get(v).map_or("?", String::as_str)));
        }
        out
    }
}

pub fn encode_intent(schema: &IntentSchema, intent: &Intent) -> Result<IntentVector> {
    schema.check(intent)?;
    let mut bits = vec![0u8; schema.total_bits()];
    let blocks = schema.blocks();
    bits[blocks[0].start + intent.action] = 1;
    for (block, &v) in blocks[1..].iter().zip(&intent.args) {
        bits[block.start + v] = 1;
    }
    Ok(IntentVector { bits })
}

/// Independent argmax per block; ties go to the lowest index.
pub fn decode_intent(schema: &IntentSchema, logits: &[f32]) -> Result<Intent> {
    if logits.len() != schema.total_bits() {
        return Err(Error::shape("decode_intent", &[schema.total_bits()], &[logits.len()]));
    }
    let mut picks = schema.blocks().into_iter().map(|block| {
        let (mut best, mut best_v) = (0, f32::NEG_INFINITY);
        for (i, &v) in logits[block].iter().enumerate() {
            if v > best_v {
                best = i;
                best_v = v;
            }
        }
        best
    });
    let action = picks.next().expect("action block");
    Ok(Intent {
        action,
        args: picks.collect(),
    })
}
