//! Simplified word-internal byte-pair encoding.
//!
//! Each whitespace-separated word becomes its characters plus a trailing
//! word-end marker symbol. Training repeatedly merges the most frequent
//! adjacent symbol pair, breaking ties by lexicographically smallest
//! (left, right). Merges never cross word boundaries. Detokenization
//! concatenates symbols and turns markers back into spaces, so encode then
//! decode is the identity on whitespace-normalized lines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{Vocabulary, UNK};
use crate::error::{Error, Result};

/// Word-end marker. Chosen to sort after ASCII so pair tie-breaks stay
/// aligned with plain-letter pairs.
pub const WORD_END: &str = "\u{2581}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    alphabet: BTreeSet<String>,
    merges: Vec<(String, String)>,
    vocab_size: usize,
}

impl BpeModel {
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn alphabet(&self) -> impl Iterator<Item = &str> {
        self.alphabet.iter().map(String::as_str)
    }

    /// Splits a word into base symbols: one per character, then the marker.
    fn word_symbols(word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        syms.push(WORD_END.to_string());
        syms
    }

    /// Applies the merge list in order, each greedily left to right.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = Self::word_symbols(word);
        for (l, r) in &self.merges {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && &syms[i] == l && &syms[i + 1] == r {
                    out.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    /// Tokenizes a line into vocabulary ids with UNK fallback.
    pub fn encode_line(&self, line: &str, vocab: &Vocabulary) -> Vec<u32> {
        line.split_whitespace()
            .flat_map(|w| self.segment_word(w))
            .map(|s| vocab.id(&s).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of `encode_line` up to whitespace normalization.
    pub fn decode_tokens(&self, tokens: &[&str]) -> String {
        let joined: String = tokens.concat();
        joined
            .replace(WORD_END, " ")
            .trim_end()
            .to_string()
    }

    /// `bpe-v1 <vocab_size>` header, then one `left<SPACE>right` per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = String::new();
        writeln!(buf, "bpe-v1 {}", self.vocab_size).expect("string write");
        for (l, r) in &self.merges {
            writeln!(buf, "{l} {r}").expect("string write");
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty BPE file", path.display())))?;
        let vocab_size = header
            .strip_prefix("bpe-v1 ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| {
                Error::Data(format!(
                    "{}: expected header `bpe-v1 <vocab_size>`, got {header:?}",
                    path.display()
                ))
            })?;
        let mut merges = Vec::new();
        let mut alphabet = BTreeSet::new();
        for (lineno, line) in lines.enumerate() {
            let (l, r) = line.split_once(' ').ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: expected `left right`",
                    path.display(),
                    lineno + 2
                ))
            })?;
            for part in [l, r] {
                for c in part.chars() {
                    alphabet.insert(c.to_string());
                }
            }
            merges.push((l.to_string(), r.to_string()));
        }
        Ok(BpeModel {
            alphabet,
            merges,
            vocab_size,
        })
    }
}

/// Learns up to `vocab_size - 4 - |alphabet|` merges from the lines.
pub fn train_bpe(lines: &[String], vocab_size: usize) -> Result<BpeModel> {
    let words = word_counts(lines);
    if words.is_empty() {
        return Err(Error::Data("train_bpe: empty corpus".into()));
    }
    let mut alphabet: BTreeSet<String> = BTreeSet::new();
    for word in words.keys() {
        for c in word.chars() {
            alphabet.insert(c.to_string());
        }
    }
    alphabet.insert(WORD_END.to_string());
    let floor = alphabet.len() + 4;
    if vocab_size < floor {
        return Err(Error::Config(format!(
            "vocab size {vocab_size} below minimum {floor} (alphabet {} + 4 reserved)",
            alphabet.len()
        )));
    }
    let budget = vocab_size - floor;

    // Work on unique words weighted by count.
    let mut table: Vec<(Vec<String>, u64)> = words
        .into_iter()
        .map(|(w, c)| (BpeModel::word_symbols(&w), c))
        .collect();
    let mut merges = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (syms, count) in &table {
            for w in syms.windows(2) {
                *pair_counts
                    .entry((w[0].clone(), w[1].clone()))
                    .or_insert(0) += count;
            }
        }
        // Most frequent pair; BTreeMap order makes the first maximum the
        // lexicographically smallest.
        let Some((best, _)) = pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        else {
            break;
        };
        let (l, r) = best.clone();
        for (syms, _) in &mut table {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        merges.push((l, r));
    }
    Ok(BpeModel {
        alphabet,
        merges,
        vocab_size,
    })
}

fn word_counts(lines: &[String]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Builds the token inventory for a trained model: reserved ids, the
/// sorted base alphabet, then merge outputs in merge order (skipping
/// strings already present). Counts come from tokenizing `lines`.
pub fn build_vocabulary(model: &BpeModel, lines: &[String]) -> Result<Vocabulary> {
    let mut vocab = Vocabulary::with_reserved();
    for sym in model.alphabet() {
        vocab.push_token(sym)?;
    }
    for (l, r) in model.merges() {
        let merged = format!("{l}{r}");
        if vocab.id(&merged).is_none() {
            vocab.push_token(&merged)?;
        }
    }
    for line in lines {
        for word in line.split_whitespace() {
            for sym in model.segment_word(word) {
                let id = vocab.id(&sym).unwrap_or(UNK);
                vocab.add_count(id, 1);
            }
        }
    }
    Ok(vocab)
}
