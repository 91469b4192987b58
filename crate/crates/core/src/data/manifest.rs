use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::feat::{read_feat, write_feat};
use crate::error::{Error, Result};
use crate::intent::{Intent, IntentSchema};
use crate::numerics::rng::Rng;
use crate::numerics::Tensor;

/// Supervision attached to an utterance besides its transcript.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Intent(Intent),
    Sentiment(usize),
    None,
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    /// `[T, n_mels]`
    pub features: Tensor<f32>,
    pub transcript: String,
    pub speaker: usize,
    pub label: Label,
}

impl Utterance {
    /// Class index of the label: the full intent combination or the
    /// sentiment class.
    pub fn class(&self, schema: Option<&IntentSchema>) -> Result<usize> {
        match (&self.label, schema) {
            (Label::Intent(intent), Some(schema)) => {
                schema.check(intent)?;
                Ok(schema.class_of(intent))
            }
            (Label::Intent(_), None) => Err(Error::Data(format!(
                "utterance {} has an intent but no schema",
                self.id
            ))),
            (Label::Sentiment(c), _) => Ok(*c),
            (Label::None, _) => Err(Error::Data(format!("utterance {} has no label", self.id))),
        }
    }
}

/// One JSON Lines record.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    features: String,
    transcript: String,
    #[serde(default)]
    speaker: usize,
    #[serde(default = "no_label")]
    label: Label,
}

fn no_label() -> Label {
    Label::None
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub utterances: Vec<Utterance>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const FEAT_DIR: &str = "feats";

impl Manifest {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Self { utterances }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Writes `dir/manifest.jsonl` plus one feature file per utterance.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join(FEAT_DIR))?;
        let mut lines = Vec::new();
        for u in &self.utterances {
            if u.id.is_empty() || !u.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return Err(Error::Data(format!("utterance id {:?} is not file-name safe", u.id)));
            }
            let rel = format!("{FEAT_DIR}/{}.feat", u.id);
            write_feat(&dir.join(&rel), &u.features)?;
            let record = Record {
                id: u.id.clone(),
                features: rel,
                transcript: u.transcript.clone(),
                speaker: u.speaker,
                label: u.label.clone(),
            };
            serde_json::to_writer(&mut lines, &record)?;
            lines.push(b'\n');
        }
        std::fs::File::create(dir.join(MANIFEST_FILE))?.write_all(&lines)?;
        Ok(())
    }

    /// Reads a manifest file, or `manifest.jsonl` inside a directory.
    /// Feature paths resolve relative to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file_path: PathBuf = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let base = file_path.parent().unwrap_or(Path::new("."));
        let file = std::fs::File::open(&file_path)
            .map_err(|e| Error::Data(format!("cannot open manifest {}: {e}", file_path.display())))?;
        let mut utterances = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", file_path.display(), n + 1)))?;
            utterances.push(Utterance {
                features: read_feat(&base.join(&record.features))?,
                id: record.id,
                transcript: record.transcript,
                speaker: record.speaker,
                label: record.label,
            });
        }
        Ok(Self { utterances })
    }

    /// Utterance indices grouped by class, classes in ascending order.
    pub fn by_class(&self, schema: Option<&IntentSchema>) -> Result<BTreeMap<usize, Vec<usize>>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            groups.entry(u.class(schema)?).or_default().push(i);
        }
        Ok(groups)
    }

    pub fn select(&self, indices: &[usize]) -> Manifest {
        Manifest {
            utterances: indices.iter().map(|&i| self.utterances[i].clone()).collect(),
        }
    }
}

/// Draws exactly `n` utterances per class without replacement. The draw
/// for each class depends only on `fold_seed` and the class index.
pub fn subset_per_class(
    manifest: &Manifest,
    n: usize,
    fold_seed: u64,
    schema: Option<&IntentSchema>,
) -> Result<Manifest> {
    let mut picked = Vec::new();
    for (class, mut members) in manifest.by_class(schema)? {
        if members.len() < n {
            let name = match schema {
                Some(s) => s.describe(&s.intent_of_class(class)),
                None => format!("class {class}"),
            };
            return Err(Error::Data(format!(
                "{name} has {} utterances, {n} requested",
                members.len()
            )));
        }
        Rng::stream(fold_seed, &format!("subset/{class}")).shuffle(&mut members);
        picked.extend_from_slice(&members[..n]);
    }
    Ok(manifest.select(&picked))
}
