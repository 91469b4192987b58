//! Text ↔ token ids with reserved special symbols.
//!
//! The desk-scale inventory is one symbol per character (the space is an
//! ordinary symbol). [`train_bpe`] grows that inventory by greedy pair
//! merges for larger vocabularies.

mod bpe;

pub use bpe::train_bpe;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const PAD: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;

pub const SPECIALS: [&str; 5] = ["<blank>", "<pad>", "<sos>", "<eos>", "<unk>"];

/// Ordered symbol inventory; a symbol's id is its position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from the full ordered symbol list, which must start with
    /// [`SPECIALS`] and contain no duplicates.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < SPECIALS.len() || symbols[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data(format!(
                "vocabulary must begin with the special symbols {SPECIALS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Data(format!("empty symbol at id {id}")));
            }
            if index.insert(s.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Specials followed by the sorted set of characters in `texts`.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let chars: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        let symbols = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(chars.into_iter().map(String::from))
            .collect();
        Self::from_symbols(symbols).expect("characters are unique and non-empty")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Characters map to their symbols (or `UNK`), then adjacent pieces are
    /// merged while their concatenation is in the inventory, always taking
    /// the merge whose result has the smallest id first.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut pieces: Vec<(String, usize)> = text
            .chars()
            .map(|c| {
                let s = c.to_string();
                let id = self.id(&s).filter(|&i| !Self::is_special(i)).unwrap_or(UNK);
                (s, id)
            })
            .collect();
        loop {
            let best = pieces
                .windows(2)
                .enumerate()
                .filter(|(_, w)| w[0].1 != UNK && w[1].1 != UNK)
                .filter_map(|(i, w)| {
                    let joined = format!("{}{}", w[0].0, w[1].0);
                    self.id(&joined).map(|id| (id, i, joined))
                })
                .min_by_key(|&(id, i, _)| (id, i));
            let Some((id, i, joined)) = best else { break };
            pieces[i] = (joined, id);
            pieces.remove(i + 1);
        }
        pieces.into_iter().map(|(_, id)| id).collect()
    }

    /// Concatenates symbols, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.symbol(id))
            .collect()
    }

    /// One symbol per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.symbols.join("\n");
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let symbols = text
            .strip_suffix('\n')
            .unwrap_or(&text)
            .split('\n')
            .map(String::from)
            .collect();
        Self::from_symbols(symbols)
    }
}
