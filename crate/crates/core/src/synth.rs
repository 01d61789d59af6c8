//! Synthetic Zipfian translation tasks.
//!
//! Content tokens w000, w001, ... are ranked by frequency: rank 1 is the
//! most probable under Zipf(s). COPY repeats the source, REVERSE flips it,
//! SUBSTITUTE maps it through a seeded bijection of the content
//! vocabulary. Generation is bitwise reproducible given the spec.

use std::str::FromStr;

use rand::Rng;

use crate::corpus::{ParallelCorpus, Split, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Substitute,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Substitute => "substitute",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "substitute" => Ok(TaskKind::Substitute),
            other => Err(Error::Config(format!(
                "unknown task kind {other:?} (expected copy, reverse, or substitute)"
            ))),
        }
    }
}

/// Parameters of one synthetic corpus draw.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub kind: TaskKind,
    /// Number of content tokens; the full vocabulary adds the 4 reserved.
    pub vocab_size: usize,
    pub zipf_s: f64,
    pub pairs: usize,
    /// Inclusive sentence-length bounds for the source side.
    pub len_range: (usize, usize),
    pub seed: u64,
    pub split: Split,
}

/// Cumulative-weight Zipf sampler over ranks 1..=n with p(r) proportional
/// to r^-s.
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, s: f64) -> Self {
        assert!(n > 0, "zipf over empty support");
        assert!(s >= 0.0, "zipf exponent must be nonnegative");
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for r in 1..=n {
            acc += (r as f64).powf(-s);
            cdf.push(acc);
        }
        let total = acc;
        for c in &mut cdf {
            *c /= total;
        }
        ZipfSampler { cdf }
    }

    /// Zero-based rank draw (0 = most frequent).
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }

    pub fn prob(&self, rank0: usize) -> f64 {
        let lo = if rank0 == 0 { 0.0 } else { self.cdf[rank0 - 1] };
        self.cdf[rank0] - lo
    }
}

fn content_token(i: usize, vocab_size: usize) -> String {
    let width = (vocab_size.saturating_sub(1)).max(1).to_string().len();
    format!("w{i:0width$}")
}

/// The reference vocabulary for a content vocab of `vocab_size` tokens:
/// 4 reserved ids, then w000.. in rank order.
pub fn synthetic_vocabulary(vocab_size: usize) -> Vocabulary {
    let mut v = Vocabulary::with_reserved();
    for i in 0..vocab_size {
        v.push_token(&content_token(i, vocab_size))
            .expect("generated tokens are distinct");
    }
    v
}

/// Draws a corpus per `spec` and returns it with the reference vocabulary,
/// whose counts are filled from the generated target side.
pub fn generate_synthetic_task(spec: &SynthSpec) -> Result<(ParallelCorpus, Vocabulary)> {
    if spec.vocab_size < 10 {
        return Err(Error::Config(format!(
            "synthetic vocab size {} too small (need at least 10)",
            spec.vocab_size
        )));
    }
    if spec.pairs < 100 {
        return Err(Error::Config(format!(
            "synthetic pair count {} too small (need at least 100)",
            spec.pairs
        )));
    }
    if spec.len_range.0 == 0 || spec.len_range.0 > spec.len_range.1 {
        return Err(Error::Config(format!(
            "bad length range {:?}",
            spec.len_range
        )));
    }

    let mut vocab = synthetic_vocabulary(spec.vocab_size);
    let first_content = 4u32;
    let sampler = ZipfSampler::new(spec.vocab_size, spec.zipf_s);
    let split_counter = match spec.split {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    };
    let mut rng = stream(spec.seed, "synth", split_counter);

    // The substitution map is shared by every split of the same seed.
    let subst = substitution_map(spec.seed, spec.vocab_size);

    let mut pairs = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        let len = rng.gen_range(spec.len_range.0..=spec.len_range.1);
        let src: Vec<u32> = (0..len)
            .map(|_| first_content + sampler.sample(&mut rng) as u32)
            .collect();
        let mut tgt: Vec<u32> = match spec.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Substitute => src
                .iter()
                .map(|&t| first_content + subst[(t - first_content) as usize] as u32)
                .collect(),
        };
        tgt.push(EOS);
        for &t in &tgt {
            vocab.add_count(t, 1);
        }
        pairs.push((src, tgt));
    }
    let corpus = ParallelCorpus::from_id_pairs(pairs, vocab.len(), spec.split)?;
    Ok((corpus, vocab))
}

/// Seeded bijection over content indices 0..n, identical across splits.
pub fn substitution_map(seed: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut map: Vec<usize> = (0..n).collect();
    let mut rng = stream(derive_seed(seed, "substitute-map", 0), "shuffle", 0);
    map.shuffle(&mut rng);
    map
}
