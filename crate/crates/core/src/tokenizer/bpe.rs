use std::collections::BTreeMap;

use super::Vocab;
use crate::error::{Error, Result};

/// Greedy pair-merge training. Starts from the character inventory of
/// `corpus` and appends one merged symbol per round until `target_size`
/// symbols exist or no pair is left. The most frequent adjacent pair wins;
/// count ties go to the lexicographically smallest pair. Spaces are never
/// merged.
pub fn train_bpe(corpus: &[&str], target_size: usize) -> Result<Vocab> {
    let base = Vocab::from_corpus(corpus.iter().copied());
    if target_size <= base.len() {
        return Err(Error::Data(format!(
            "BPE target size {target_size} must exceed the base inventory of {}",
            base.len()
        )));
    }
    let mut symbols = base.symbols().to_vec();
    let mut seqs: Vec<Vec<String>> = corpus.iter().map(|t| t.chars().map(String::from).collect()).collect();
    while symbols.len() < target_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for seq in &seqs {
            for w in seq.windows(2) {
                if w[0] != " " && w[1] != " " {
                    *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += 1;
                }
            }
        }
        // First maximum in lexicographic pair order.
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &count) in &counts {
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((pair, count));
            }
        }
        let Some(((left, right), _)) = best else { break };
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{right}");
        for seq in &mut seqs {
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut seq[i]));
                    i += 1;
                }
            }
            *seq = out;
        }
        if !symbols.contains(&merged) {
            symbols.push(merged);
        }
    }
    Vocab::from_symbols(symbols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_pair_merges() {
        let base = Vocab::from_corpus(["aaaa"]).len();
        let v = train_bpe(&["aaaa"], base + 1).unwrap();
        assert_eq!(v.symbol(base), Some("aa"));
        assert_eq!(v.encode("aaaa"), vec![base, base]);
    }

    #[test]
    fn count_ties_pick_lexicographically_smallest_pair() {
        let corpus = ["cd ab"];
        let base = Vocab::from_corpus(corpus).len();
        let v = train_bpe(&corpus, base + 1).unwrap();
        assert_eq!(v.symbol(base), Some("ab"));
    }

    #[test]
    fn target_not_above_charset_is_rejected() {
        let base = Vocab::from_corpus(["abc"]).len();
        assert!(train_bpe(&["abc"], base).is_err());
    }

    #[test]
    fn retraining_is_deterministic() {
        let corpus = ["move forward slowly", "move back fast", "turn left slowly"];
        assert_eq!(train_bpe(&corpus, 40).unwrap(), train_bpe(&corpus, 40).unwrap());
    }

    proptest! {
        #[test]
        fn round_trip_and_never_longer_than_chars(
            words in proptest::collection::vec("[a-e]{1,6}", 1..8),
            extra in 1usize..20,
        ) {
            let text = words.join(" ");
            let corpus = [text.as_str()];
            let chars = Vocab::from_corpus(corpus);
            let v = train_bpe(&corpus, chars.len() + extra).unwrap();
            let ids = v.encode(&text);
            prop_assert_eq!(v.decode(&ids), text.clone());
            prop_assert!(ids.len() <= chars.encode(&text).len());
        }
    }
}
