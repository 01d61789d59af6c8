//! Vocabulary, unigram estimation, and parallel-corpus containers.
//!
//! Ids 0..=3 are reserved for PAD, BOS, EOS, UNK in that order. The
//! unigram distribution is estimated from the target side of the parallel
//! corpus (the output layer predicts target tokens), with EOS counted once
//! per sentence and PAD/BOS left at the smoothed floor.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token inventory with contiguous ids and occurrence counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// A vocabulary holding only the four reserved tokens.
    pub fn with_reserved() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push_token(t).expect("reserved tokens are distinct");
        }
        v
    }

    /// Appends a token with count 0, assigning the next id. Errors on
    /// duplicates.
    pub fn push_token(&mut self, token: &str) -> Result<u32> {
        if self.index.contains_key(token) {
            return Err(Error::Data(format!("duplicate token {token:?}")));
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.counts.push(0);
        self.index.insert(token.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn set_count(&mut self, id: u32, count: u64) {
        self.counts[id as usize] = count;
    }

    pub fn add_count(&mut self, id: u32, delta: u64) {
        self.counts[id as usize] += delta;
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace-tokenizes a line into ids with UNK fallback.
    pub fn encode_words(&self, line: &str) -> Vec<u32> {
        line.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Joins ids with single spaces, skipping nothing.
    pub fn decode_words(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }

    /// One `token<TAB>count` line per token, id = line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            writeln!(buf, "{t}\t{c}").expect("string write");
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Vocabulary {
            tokens: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for (lineno, line) in text.lines().enumerate() {
            let (token, count) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: expected token<TAB>count",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let count: u64 = count.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}:{}: bad count {count:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let id = v.push_token(token)?;
            v.counts[id as usize] = count;
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if v.tokens.get(i).map(String::as_str) != Some(want) {
                return Err(Error::Data(format!(
                    "{}: id {i} must be the reserved token {want:?}",
                    path.display()
                )));
            }
        }
        Ok(v)
    }
}

/// Smoothed token distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramDistribution {
    probs: Vec<f64>,
}

impl UnigramDistribution {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "unigram probabilities must be nonnegative and sum to 1, got sum {sum}"
            )));
        }
        Ok(UnigramDistribution { probs })
    }

    pub fn uniform(vocab_len: usize) -> Self {
        assert!(vocab_len > 0, "uniform unigram over empty vocabulary");
        UnigramDistribution {
            probs: vec![1.0 / vocab_len as f64; vocab_len],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Elementwise log. Errors if any entry is zero (use smoothing k > 0
    /// when a log is needed downstream).
    pub fn log_probs(&self) -> Result<Vec<f64>> {
        if let Some(i) = self.probs.iter().position(|&p| p <= 0.0) {
            return Err(Error::Data(format!(
                "log of unigram entry {i} is undefined (probability {})",
                self.probs[i]
            )));
        }
        Ok(self.probs.iter().map(|p| p.ln()).collect())
    }

    /// Shannon entropy in nats, skipping zero entries.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// Add-k estimate over token-id sequences: probs[t] = (count(t)+k)/(N+k|V|).
pub fn estimate_unigram(
    sequences: &[Vec<u32>],
    vocab_len: usize,
    k: f64,
) -> Result<UnigramDistribution> {
    if sequences.is_empty() {
        return Err(Error::Data("estimate_unigram: empty corpus".into()));
    }
    assert!(k >= 0.0, "estimate_unigram: smoothing k must be nonnegative");
    let mut counts = vec![0u64; vocab_len];
    let mut total = 0u64;
    for seq in sequences {
        for &id in seq {
            let slot = counts.get_mut(id as usize).ok_or_else(|| {
                Error::Data(format!("token id {id} out of range for |V| = {vocab_len}"))
            })?;
            *slot += 1;
            total += 1;
        }
    }
    let denom = total as f64 + k * vocab_len as f64;
    let probs = counts
        .iter()
        .map(|&c| (c as f64 + k) / denom)
        .collect();
    Ok(UnigramDistribution { probs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Aligned (source, target) token-id pairs. Targets always end with EOS;
/// sources carry no EOS (the encoder sees them verbatim).
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pairs: Vec<(Vec<u32>, Vec<u32>)>,
    split: Split,
}

impl ParallelCorpus {
    pub fn from_id_pairs(
        pairs: Vec<(Vec<u32>, Vec<u32>)>,
        vocab_len: usize,
        split: Split,
    ) -> Result<Self> {
        for (i, (src, tgt)) in pairs.iter().enumerate() {
            if let Some(&id) = src.iter().chain(tgt.iter()).find(|&&id| id as usize >= vocab_len) {
                return Err(Error::Data(format!(
                    "pair {i}: token id {id} out of range for |V| = {vocab_len}"
                )));
            }
            if tgt.last() != Some(&EOS) {
                return Err(Error::Data(format!(
                    "pair {i}: target does not end with EOS"
                )));
            }
        }
        Ok(ParallelCorpus { pairs, split })
    }

    /// Encodes aligned text lines. EOS is appended to every target.
    pub fn build<F>(
        src_lines: &[String],
        tgt_lines: &[String],
        encode: F,
        vocab_len: usize,
        split: Split,
    ) -> Result<Self>
    where
        F: Fn(&str) -> Vec<u32>,
    {
        if src_lines.len() != tgt_lines.len() {
            return Err(Error::Data(format!(
                "unaligned corpus: {} source lines vs {} target lines",
                src_lines.len(),
                tgt_lines.len()
            )));
        }
        let pairs = src_lines
            .iter()
            .zip(tgt_lines)
            .map(|(s, t)| {
                let mut tgt = encode(t);
                tgt.push(EOS);
                (encode(s), tgt)
            })
            .collect();
        Self::from_id_pairs(pairs, vocab_len, split)
    }

    pub fn pairs(&self) -> &[(Vec<u32>, Vec<u32>)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn targets(&self) -> Vec<Vec<u32>> {
        self.pairs.iter().map(|(_, t)| t.clone()).collect()
    }
}

/// Reads a UTF-8 text file into lines.
pub fn load_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Writes lines with trailing newlines.
pub fn save_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut buf = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
