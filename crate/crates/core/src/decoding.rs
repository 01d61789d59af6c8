//! Greedy and length-normalized beam-search decoding over a frozen model.
//!
//! Decoding sees the model through [`NextTokenModel`], which separates the
//! per-source setup (running the encoder once) from per-step conditional
//! distributions. Hand-built table models implement the same trait, which is
//! what the enumeration oracles in the tests rely on.

use std::cmp::Ordering;

use crate::corpus::{BOS, EOS, PAD};
use crate::model::{EncodedSource, TransformerModel};

/// Next-token interface for decoding. `Ctx` carries whatever per-source
/// state the model wants to reuse across steps.
pub trait NextTokenModel {
    type Ctx;

    fn vocab_size(&self) -> usize;

    /// Per-source setup, run once before the first step.
    fn start(&self, source: &[u32]) -> Self::Ctx;

    /// Log-probabilities over the next token given the emitted prefix.
    fn next_log_probs(&self, ctx: &Self::Ctx, prefix: &[u32]) -> Vec<f64>;
}

impl NextTokenModel for TransformerModel {
    type Ctx = EncodedSource;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn start(&self, source: &[u32]) -> EncodedSource {
        self.encode_source(source)
    }

    fn next_log_probs(&self, ctx: &EncodedSource, prefix: &[u32]) -> Vec<f64> {
        self.next_token_logprobs(ctx, prefix)
    }
}

/// A model defined by a closure from (source, prefix) to next-token
/// log-probabilities. Useful for hand-built transition tables.
pub struct FnModel<F>
where
    F: Fn(&[u32], &[u32]) -> Vec<f64>,
{
    vocab: usize,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&[u32], &[u32]) -> Vec<f64>,
{
    pub fn new(vocab: usize, f: F) -> Self {
        FnModel { vocab, f }
    }
}

impl<F> NextTokenModel for FnModel<F>
where
    F: Fn(&[u32], &[u32]) -> Vec<f64>,
{
    type Ctx = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self, source: &[u32]) -> Vec<u32> {
        source.to_vec()
    }

    fn next_log_probs(&self, ctx: &Vec<u32>, prefix: &[u32]) -> Vec<f64> {
        let row = (self.f)(ctx, prefix);
        assert_eq!(row.len(), self.vocab, "table row has wrong width");
        row
    }
}

/// A decoded candidate: the emitted tokens (ending with EOS or cut off at
/// the length limit) and their cumulative log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Length-normalized score: cumulative log-probability divided by the
    /// number of generated tokens (exponent 1, no extra penalty).
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    fn extend(&self, token: u32, log_p: f64) -> Hypothesis {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.extend_from_slice(&self.tokens);
        tokens.push(token);
        Hypothesis {
            tokens,
            log_prob: self.log_prob + log_p,
        }
    }
}

/// Orders better hypotheses first: higher key, then lexicographically
/// smaller token sequence so ties resolve deterministically by token id.
fn by_key_desc(key: impl Fn(&Hypothesis) -> f64) -> impl Fn(&Hypothesis, &Hypothesis) -> Ordering {
    move |a, b| {
        key(b)
            .partial_cmp(&key(a))
            .expect("hypothesis scores must not be NaN")
            .then_with(|| a.tokens.cmp(&b.tokens))
    }
}

/// Greedy decoding: the argmax token each step, ties broken by lowest id;
/// stops at EOS or after `max_len` tokens. PAD and BOS are never emitted.
pub fn greedy_decode<M: NextTokenModel>(model: &M, source: &[u32], max_len: usize) -> Hypothesis {
    assert!(max_len >= 1, "max_len must be at least 1");
    let ctx = model.start(source);
    let v = model.vocab_size();
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    for _ in 0..max_len {
        let log_probs = model.next_log_probs(&ctx, &hyp.tokens);
        assert_eq!(log_probs.len(), v, "model row has wrong width");
        let mut best: Option<u32> = None;
        for tok in 0..v as u32 {
            if tok == PAD || tok == BOS {
                continue;
            }
            match best {
                // Strict comparison keeps the lowest id on ties.
                Some(b) if log_probs[tok as usize] <= log_probs[b as usize] => {}
                _ => best = Some(tok),
            }
        }
        let tok = best.expect("vocabulary has no emittable token");
        hyp = hyp.extend(tok, log_probs[tok as usize]);
        if tok == EOS {
            break;
        }
    }
    hyp
}

/// Length-normalized beam search. Each step expands every active
/// hypothesis over all emittable tokens, keeps the `beam_size` best
/// extensions by cumulative log-probability, and retires those ending in
/// EOS to a pool. When the beam empties or `max_len` is reached, the best
/// pooled or still-active hypothesis by normalized score wins. Ties break
/// toward lower token ids, making the search fully deterministic.
pub fn beam_search<M: NextTokenModel>(
    model: &M,
    source: &[u32],
    beam_size: usize,
    max_len: usize,
) -> Hypothesis {
    assert!(beam_size >= 1, "beam_size must be at least 1");
    assert!(max_len >= 1, "max_len must be at least 1");
    let ctx = model.start(source);
    let v = model.vocab_size();

    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &active {
            let log_probs = model.next_log_probs(&ctx, &hyp.tokens);
            assert_eq!(log_probs.len(), v, "model row has wrong width");
            for tok in 0..v as u32 {
                if tok == PAD || tok == BOS {
                    continue;
                }
                candidates.push(hyp.extend(tok, log_probs[tok as usize]));
            }
        }
        candidates.sort_by(by_key_desc(|h: &Hypothesis| h.log_prob));
        candidates.truncate(beam_size);
        active = Vec::with_capacity(beam_size);
        for cand in candidates {
            if cand.finished() {
                pool.push(cand);
            } else {
                active.push(cand);
            }
        }
    }
    // Unfinished survivors are cut off at max_len and compete as they are.
    pool.extend(active);

    pool.sort_by(by_key_desc(Hypothesis::score));
    pool.into_iter().next().expect("pool cannot be empty")
}

/// Brute-force reference: enumerates every sequence over emittable tokens
/// that ends with EOS or runs to exactly `max_len`, scoring each by
/// normalized log-probability under the model. Exponential in `max_len`;
/// only usable on tiny vocabularies.
pub fn exhaustive_best<M: NextTokenModel>(
    model: &M,
    source: &[u32],
    max_len: usize,
) -> Hypothesis {
    assert!(max_len >= 1, "max_len must be at least 1");
    let ctx = model.start(source);
    let v = model.vocab_size();
    let mut best: Option<Hypothesis> = None;

    fn walk<M: NextTokenModel>(
        model: &M,
        ctx: &M::Ctx,
        prefix: &Hypothesis,
        max_len: usize,
        v: usize,
        consider: &mut dyn FnMut(Hypothesis),
    ) {
        let log_probs = model.next_log_probs(ctx, &prefix.tokens);
        for tok in 0..v as u32 {
            if tok == PAD || tok == BOS {
                continue;
            }
            let next = prefix.extend(tok, log_probs[tok as usize]);
            if tok == EOS || next.tokens.len() == max_len {
                consider(next);
            } else {
                walk(model, ctx, &next, max_len, v, consider);
            }
        }
    }

    let root = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    let cmp = by_key_desc(Hypothesis::score);
    let mut on_candidate = |h: Hypothesis| {
        let replace = match &best {
            None => true,
            Some(b) => cmp(&h, b) == Ordering::Less,
        };
        if replace {
            best = Some(h);
        }
    };
    walk(model, &ctx, &root, max_len, v, &mut on_candidate);
    drop(on_candidate);
    best.expect("enumeration produced no candidates")
}
