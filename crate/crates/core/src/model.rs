//! Pre-norm transformer encoder-decoder with a factorized output layer.
//!
//! The output layer computes logits = h Wᵀ + b. The bias starts as zeros,
//! is omitted entirely, or is set to the log of a unigram distribution
//! (from the training corpus or an external one); in the log-unigram modes
//! W is rescaled so its Frobenius norm equals ‖b‖₂ exactly. Because
//! softmax(Wφ + b) is proportional to softmax(Wφ) ⊙ softmax(b), the output
//! distribution factorizes into a contextual expert and a static prior,
//! which `decompose_experts` exposes directly.
//!
//! Parameters live outside the tape as named f64 arrays and are staged as
//! leaves for each forward pass. All randomness is drawn from streams
//! derived from (seed, parameter name), so adding parameters never shifts
//! the draws of existing ones.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, TensorId};
use crate::corpus::{UnigramDistribution, Vocabulary, BOS};
use crate::error::{Error, Result};
use crate::rng::{normal, stream};

/// Additive attention-mask value for disallowed positions.
pub const MASK_NEG: f64 = -1e30;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Decoder-only language model: no encoder, no cross-attention.
    pub lm_mode: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, d = 64, FFN 128.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ffn: 128,
            dropout: 0.1,
            vocab_size,
            max_len: 64,
            lm_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.heads < 1 || self.d_model < 1 || self.d_ffn < 1 {
            return Err(Error::Config(format!(
                "model dimensions must be at least 1: layers {}, heads {}, d_model {}, d_ffn {}",
                self.layers, self.heads, self.d_model, self.d_ffn
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocab size {} leaves no room for content tokens",
                self.vocab_size
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!("max_len {} too small", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    Zero,
    None,
    LogUnigram,
    ExternalLogUnigram,
}

impl BiasMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasMode::Zero => "zero",
            BiasMode::None => "none",
            BiasMode::LogUnigram => "log_unigram",
            BiasMode::ExternalLogUnigram => "external_log_unigram",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" => Ok(BiasMode::Zero),
            "none" => Ok(BiasMode::None),
            "log_unigram" => Ok(BiasMode::LogUnigram),
            "external_log_unigram" => Ok(BiasMode::ExternalLogUnigram),
            other => Err(Error::Config(format!(
                "unknown bias mode {other:?} (expected zero, none, log_unigram, external_log_unigram)"
            ))),
        }
    }

    fn code(self) -> u8 {
        match self {
            BiasMode::Zero => 0,
            BiasMode::None => 1,
            BiasMode::LogUnigram => 2,
            BiasMode::ExternalLogUnigram => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(BiasMode::Zero),
            1 => Ok(BiasMode::None),
            2 => Ok(BiasMode::LogUnigram),
            3 => Ok(BiasMode::ExternalLogUnigram),
            other => Err(Error::Checkpoint(format!("unknown bias mode code {other}"))),
        }
    }

    pub fn has_bias(self) -> bool {
        self != BiasMode::None
    }
}

/// How to initialize the output bias. Log-unigram modes carry the
/// distribution whose log becomes b.
#[derive(Debug, Clone)]
pub struct BiasInit {
    pub mode: BiasMode,
    pub distribution: Option<UnigramDistribution>,
}

impl BiasInit {
    pub fn zero() -> Self {
        BiasInit {
            mode: BiasMode::Zero,
            distribution: None,
        }
    }

    pub fn none() -> Self {
        BiasInit {
            mode: BiasMode::None,
            distribution: None,
        }
    }

    pub fn log_unigram(u: UnigramDistribution) -> Self {
        BiasInit {
            mode: BiasMode::LogUnigram,
            distribution: Some(u),
        }
    }

    pub fn external_log_unigram(u: UnigramDistribution) -> Self {
        BiasInit {
            mode: BiasMode::ExternalLogUnigram,
            distribution: Some(u),
        }
    }
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {name}: shape {shape:?} does not match data length {}",
            data.len()
        );
        assert!(
            !self.index.contains_key(name),
            "param {name} registered twice"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), shape, data));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.entries
            .iter()
            .map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn data(&self, name: &str) -> &[f64] {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"));
        &self.entries[i].2
    }

    pub fn data_mut(&mut self, name: &str) -> &mut [f64] {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"));
        &mut self.entries[i].2
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, _, d)| d.len()).sum()
    }
}

fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Numerically stable softmax of a plain slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Stable log-softmax of a plain slice.
pub fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|&v| v - lse).collect()
}

/// Elementwise product renormalized to sum 1 (the product-of-experts
/// combination rule).
pub fn normalize_product(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "normalize_product: length mismatch");
    let mut out: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let sum: f64 = out.iter().sum();
    assert!(sum > 0.0, "normalize_product: zero total mass");
    for o in &mut out {
        *o /= sum;
    }
    out
}

pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: Params,
    pub bias_mode: BiasMode,
    /// Cumulative factor applied to the raw output matrix at init.
    pub w_scale: f64,
    pub seed: u64,
    pe: Vec<f64>,
}

impl TransformerModel {
    pub fn new(config: ModelConfig, bias_init: &BiasInit, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let mut params = Params::new();

        let mat = |name: &str, rows: usize, cols: usize| -> (Vec<usize>, Vec<f64>) {
            let std = 1.0 / (rows as f64).sqrt();
            let mut rng = stream(seed, name, 0);
            let data = (0..rows * cols).map(|_| normal(&mut rng) * std).collect();
            (vec![rows, cols], data)
        };
        let reg_mat = |params: &mut Params, name: &str, rows: usize, cols: usize| {
            let (shape, data) = mat(name, rows, cols);
            params.register(name, shape, data);
        };
        let reg_ln = |params: &mut Params, prefix: &str| {
            params.register(&format!("{prefix}.gain"), vec![d], vec![1.0; d]);
            params.register(&format!("{prefix}.shift"), vec![d], vec![0.0; d]);
        };
        let reg_attn = |params: &mut Params, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                let name = format!("{prefix}.{w}");
                let (shape, data) = mat(&name, d, d);
                params.register(&name, shape, data);
            }
        };

        reg_mat(&mut params, "embed", v, d);

        if !config.lm_mode {
            for l in 0..config.layers {
                reg_ln(&mut params, &format!("enc{l}.ln1"));
                reg_attn(&mut params, &format!("enc{l}.attn"));
                reg_ln(&mut params, &format!("enc{l}.ln2"));
                reg_mat(&mut params, &format!("enc{l}.ffn.w1"), d, config.d_ffn);
                params.register(&format!("enc{l}.ffn.b1"), vec![config.d_ffn], vec![0.0; config.d_ffn]);
                reg_mat(&mut params, &format!("enc{l}.ffn.w2"), config.d_ffn, d);
                params.register(&format!("enc{l}.ffn.b2"), vec![d], vec![0.0; d]);
            }
            reg_ln(&mut params, "enc_final_ln");
        }

        for l in 0..config.layers {
            reg_ln(&mut params, &format!("dec{l}.ln1"));
            reg_attn(&mut params, &format!("dec{l}.self_attn"));
            if !config.lm_mode {
                reg_ln(&mut params, &format!("dec{l}.ln2"));
                reg_attn(&mut params, &format!("dec{l}.cross_attn"));
            }
            reg_ln(&mut params, &format!("dec{l}.ln3"));
            reg_mat(&mut params, &format!("dec{l}.ffn.w1"), d, config.d_ffn);
            params.register(&format!("dec{l}.ffn.b1"), vec![config.d_ffn], vec![0.0; config.d_ffn]);
            reg_mat(&mut params, &format!("dec{l}.ffn.w2"), config.d_ffn, d);
            params.register(&format!("dec{l}.ffn.b2"), vec![d], vec![0.0; d]);
        }
        reg_ln(&mut params, "dec_final_ln");

        // Output projection: N(0, 1/sqrt(d)) elementwise, vocab-major rows.
        {
            let name = "out.w";
            let std = 1.0 / (d as f64).sqrt();
            let mut rng = stream(seed, name, 0);
            let data: Vec<f64> = (0..v * d).map(|_| normal(&mut rng) * std).collect();
            params.register(name, vec![v, d], data);
        }

        let mut w_scale = 1.0;
        match bias_init.mode {
            BiasMode::Zero => {
                params.register("out.b", vec![v], vec![0.0; v]);
            }
            BiasMode::None => {}
            BiasMode::LogUnigram | BiasMode::ExternalLogUnigram => {
                let u = bias_init.distribution.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "bias mode {} requires a unigram distribution",
                        bias_init.mode.as_str()
                    ))
                })?;
                if u.len() != v {
                    return Err(Error::Config(format!(
                        "unigram has {} entries but vocab size is {v}",
                        u.len()
                    )));
                }
                let b = u.log_probs()?;
                let b_norm = l2_norm(&b);
                let w = params.data_mut("out.w");
                // Two scaling passes push the relative norm mismatch to
                // rounding error so the norm-match invariant holds exactly
                // within 1e-12.
                for _ in 0..2 {
                    let w_norm = l2_norm(w);
                    let s = b_norm / w_norm;
                    for x in w.iter_mut() {
                        *x *= s;
                    }
                    w_scale *= s;
                    if ((l2_norm(w) - b_norm) / b_norm).abs() < 1e-13 {
                        break;
                    }
                }
                params.register("out.b", vec![v], b);
            }
        }

        let pe = sinusoidal_pe(config.max_len, d);
        Ok(TransformerModel {
            config,
            params,
            bias_mode: bias_init.mode,
            w_scale,
            seed,
            pe,
        })
    }

    fn from_parts(
        config: ModelConfig,
        params: Params,
        bias_mode: BiasMode,
        w_scale: f64,
        seed: u64,
    ) -> Self {
        let pe = sinusoidal_pe(config.max_len, config.d_model);
        TransformerModel {
            config,
            params,
            bias_mode,
            w_scale,
            seed,
            pe,
        }
    }

    /// Diagnostic: zero the output projection so logits reduce to the bias
    /// and the model's distribution becomes softmax(b) for every context.
    pub fn set_output_weights_zero(&mut self) {
        for x in self.params.data_mut("out.w") {
            *x = 0.0;
        }
    }

    fn pe_rows(&self, len: usize) -> Vec<f64> {
        assert!(
            len <= self.config.max_len,
            "sequence length {len} exceeds max_len {}",
            self.config.max_len
        );
        self.pe[..len * self.config.d_model].to_vec()
    }

    /// Stages every parameter on the tape. Trainable staging records grads.
    pub fn stage<'m>(&'m self, tape: &mut Tape, trainable: bool) -> StagedModel<'m> {
        let mut ids = HashMap::new();
        for (name, shape, data) in self.params.iter() {
            ids.insert(
                name.to_string(),
                tape.leaf(data.to_vec(), shape.to_vec(), trainable),
            );
        }
        TransformerModel::stage_from_ids(self, tape, ids)
    }

    /// Builds a staged view from externally created leaves, one per
    /// parameter name. Used by gradient checking, which perturbs the leaf
    /// values itself.
    pub fn stage_from_ids<'m>(
        &'m self,
        tape: &mut Tape,
        ids: HashMap<String, TensorId>,
    ) -> StagedModel<'m> {
        let out_wt = tape.transpose(ids["out.w"]);
        StagedModel {
            model: self,
            ids,
            out_wt,
        }
    }

    /// Parameter list in registration order, in the layout `gradcheck`
    /// expects: (name, values, shape).
    pub fn param_specs(&self) -> Vec<(String, Vec<f64>, Vec<usize>)> {
        self.params
            .iter()
            .map(|(n, s, d)| (n.to_string(), d.to_vec(), s.to_vec()))
            .collect()
    }

    /// Teacher-forced log-probability rows for each target position,
    /// evaluation mode. Row t is log p(. | source, target[..t]).
    pub fn teacher_forced_log_probs(
        &self,
        src: &[u32],
        tgt: &[u32],
        include_bias: bool,
    ) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let h = staged.decode_hidden_for_target(&mut tape, src, tgt, &mut None);
        let logits = staged.project_with(&mut tape, h, include_bias);
        let v = self.config.vocab_size;
        let data = tape.data(logits);
        (0..tgt.len())
            .map(|t| log_softmax_slice(&data[t * v..(t + 1) * v]))
            .collect()
    }

    /// Next-token distribution after a target prefix, evaluation mode.
    pub fn forward_next_token_dist(&self, src: &[u32], prefix: &[u32]) -> Vec<f64> {
        let enc = self.encode_source(src);
        self.next_token_logprobs(&enc, prefix)
            .iter()
            .map(|lp| lp.exp())
            .collect()
    }

    /// Runs the encoder once so repeated decodes can reuse it. In LM mode
    /// the source is ignored and the context is empty.
    pub fn encode_source(&self, src: &[u32]) -> EncodedSource {
        if self.config.lm_mode {
            return EncodedSource {
                data: Vec::new(),
                len: 0,
            };
        }
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let enc = staged.encode(&mut tape, src, &mut None);
        EncodedSource {
            data: tape.data(enc).to_vec(),
            len: src.len(),
        }
    }

    /// Log p(. | source, prefix) for the next position, evaluation mode.
    pub fn next_token_logprobs(&self, enc: &EncodedSource, prefix: &[u32]) -> Vec<f64> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let enc_id = (!self.config.lm_mode).then(|| {
            tape.constant(enc.data.clone(), vec![enc.len, self.config.d_model])
        });
        let mut dec_in = Vec::with_capacity(prefix.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(prefix);
        let h = staged.decode_hidden(&mut tape, enc_id, &dec_in, &mut None);
        let logits = staged.project_with(&mut tape, h, true);
        let v = self.config.vocab_size;
        let data = tape.data(logits);
        let last = &data[(dec_in.len() - 1) * v..];
        log_softmax_slice(last)
    }

    /// Splits the next-token distribution into the contextual expert
    /// softmax(Wφ), the static prior softmax(b) (uniform when the bias is
    /// omitted), and the combined softmax(Wφ + b).
    pub fn decompose_experts(
        &self,
        src: &[u32],
        prefix: &[u32],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let enc_id = if self.config.lm_mode {
            None
        } else {
            Some(staged.encode(&mut tape, src, &mut None))
        };
        let mut dec_in = Vec::with_capacity(prefix.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(prefix);
        let h = staged.decode_hidden(&mut tape, enc_id, &dec_in, &mut None);
        let z = staged.project_with(&mut tape, h, false);
        let v = self.config.vocab_size;
        let last_row = (dec_in.len() - 1) * v;
        let ctx_logits = &tape.data(z)[last_row..last_row + v];

        let contextual = softmax_slice(ctx_logits);
        let (prior, combined) = if self.bias_mode.has_bias() {
            let b = self.params.data("out.b");
            let with_bias: Vec<f64> = ctx_logits.iter().zip(b).map(|(x, y)| x + y).collect();
            (softmax_slice(b), softmax_slice(&with_bias))
        } else {
            (vec![1.0 / v as f64; v], contextual.clone())
        };
        (contextual, prior, combined)
    }
}

/// Frozen encoder output for reuse across decode steps.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    data: Vec<f64>,
    len: usize,
}

/// Per-tape handles to the staged parameters.
pub struct StagedModel<'m> {
    model: &'m TransformerModel,
    ids: HashMap<String, TensorId>,
    out_wt: TensorId,
}

impl<'m> StagedModel<'m> {
    fn p(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("param {name} not staged"))
    }

    /// Tape ids of every staged parameter, for gradient collection.
    pub fn param_ids(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, &id)| (n.as_str(), id))
    }

    pub fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape,
        x: TensorId,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> TensorId {
        match rng.as_deref_mut() {
            Some(r) if self.model.config.dropout > 0.0 => {
                tape.dropout(x, self.model.config.dropout, r)
            }
            _ => x,
        }
    }

    fn embed_seq(
        &self,
        tape: &mut Tape,
        ids: &[u32],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> TensorId {
        assert!(!ids.is_empty(), "cannot embed an empty sequence");
        let d = self.model.config.d_model;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = tape.embed(self.p("embed"), &idx);
        let scaled = tape.scale(e, (d as f64).sqrt());
        let pe = tape.constant(self.model.pe_rows(ids.len()), vec![ids.len(), d]);
        let x = tape.add(scaled, pe);
        self.maybe_dropout(tape, x, rng)
    }

    fn layer_norm(&self, tape: &mut Tape, prefix: &str, x: TensorId) -> TensorId {
        let gain = self.p(&format!("{prefix}.gain"));
        let shift = self.p(&format!("{prefix}.shift"));
        tape.layer_norm(x, gain, shift, LN_EPS)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        prefix: &str,
        q_in: TensorId,
        kv_in: TensorId,
        causal: bool,
    ) -> TensorId {
        let cfg = &self.model.config;
        let dh = cfg.head_dim();
        let q = tape.matmul(q_in, self.p(&format!("{prefix}.wq")));
        let k = tape.matmul(kv_in, self.p(&format!("{prefix}.wk")));
        let v = tape.matmul(kv_in, self.p(&format!("{prefix}.wv")));
        let t_len = tape.shape(q)[0];
        let s_len = tape.shape(k)[0];
        let mask = causal.then(|| {
            let mut m = vec![0.0; t_len * s_len];
            for i in 0..t_len {
                for j in (i + 1)..s_len {
                    m[i * s_len + j] = MASK_NEG;
                }
            }
            tape.constant(m, vec![t_len, s_len])
        });
        let scale = 1.0 / (dh as f64).sqrt();
        let mut parts = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            let kht = tape.transpose(kh);
            let sc = tape.matmul(qh, kht);
            let scs = tape.scale(sc, scale);
            let masked = match mask {
                Some(m) => tape.add(scs, m),
                None => scs,
            };
            let probs = tape.softmax(masked);
            parts.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&parts);
        tape.matmul(ctx, self.p(&format!("{prefix}.wo")))
    }

    fn ffn(&self, tape: &mut Tape, prefix: &str, x: TensorId) -> TensorId {
        let h1 = tape.matmul(x, self.p(&format!("{prefix}.w1")));
        let h1b = tape.add(h1, self.p(&format!("{prefix}.b1")));
        let a = tape.relu(h1b);
        let h2 = tape.matmul(a, self.p(&format!("{prefix}.w2")));
        tape.add(h2, self.p(&format!("{prefix}.b2")))
    }

    /// Encoder stack over the source tokens.
    pub fn encode(
        &self,
        tape: &mut Tape,
        src: &[u32],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> TensorId {
        assert!(
            !self.model.config.lm_mode,
            "encode called on a decoder-only model"
        );
        let mut x = self.embed_seq(tape, src, rng);
        for l in 0..self.model.config.layers {
            let n1 = self.layer_norm(tape, &format!("enc{l}.ln1"), x);
            let a = self.attention(tape, &format!("enc{l}.attn"), n1, n1, false);
            let ad = self.maybe_dropout(tape, a, rng);
            x = tape.add(x, ad);
            let n2 = self.layer_norm(tape, &format!("enc{l}.ln2"), x);
            let f = self.ffn(tape, &format!("enc{l}.ffn"), n2);
            let fd = self.maybe_dropout(tape, f, rng);
            x = tape.add(x, fd);
        }
        self.layer_norm(tape, "enc_final_ln", x)
    }

    /// Decoder stack over `dec_input` (BOS-prefixed target), attending to
    /// `enc_out` when present.
    pub fn decode_hidden(
        &self,
        tape: &mut Tape,
        enc_out: Option<TensorId>,
        dec_input: &[u32],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> TensorId {
        let mut y = self.embed_seq(tape, dec_input, rng);
        for l in 0..self.model.config.layers {
            let n1 = self.layer_norm(tape, &format!("dec{l}.ln1"), y);
            let a = self.attention(tape, &format!("dec{l}.self_attn"), n1, n1, true);
            let ad = self.maybe_dropout(tape, a, rng);
            y = tape.add(y, ad);
            if let Some(enc) = enc_out {
                let n2 = self.layer_norm(tape, &format!("dec{l}.ln2"), y);
                let c = self.attention(tape, &format!("dec{l}.cross_attn"), n2, enc, false);
                let cd = self.maybe_dropout(tape, c, rng);
                y = tape.add(y, cd);
            }
            let n3 = self.layer_norm(tape, &format!("dec{l}.ln3"), y);
            let f = self.ffn(tape, &format!("dec{l}.ffn"), n3);
            let fd = self.maybe_dropout(tape, f, rng);
            y = tape.add(y, fd);
        }
        self.layer_norm(tape, "dec_final_ln", y)
    }

    /// Encoder + decoder hidden states for teacher forcing: row t of the
    /// result predicts tgt[t].
    pub fn decode_hidden_for_target(
        &self,
        tape: &mut Tape,
        src: &[u32],
        tgt: &[u32],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> TensorId {
        assert!(!tgt.is_empty(), "empty target sequence");
        let enc = (!self.model.config.lm_mode).then(|| self.encode(tape, src, rng));
        let mut dec_in = Vec::with_capacity(tgt.len());
        dec_in.push(BOS);
        dec_in.extend_from_slice(&tgt[..tgt.len() - 1]);
        self.decode_hidden(tape, enc, &dec_in, rng)
    }

    /// Output projection: h Wᵀ, plus the bias when present and requested.
    pub fn project_with(&self, tape: &mut Tape, h: TensorId, include_bias: bool) -> TensorId {
        let z = tape.matmul(h, self.out_wt);
        if include_bias && self.model.bias_mode.has_bias() {
            tape.add(z, self.p("out.b"))
        } else {
            z
        }
    }

    /// Teacher-forced logits [T, V] for one sentence pair.
    pub fn logits(
        &self,
        tape: &mut Tape,
        src: &[u32],
        tgt: &[u32],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> TensorId {
        let h = self.decode_hidden_for_target(tape, src, tgt, rng);
        self.project_with(tape, h, true)
    }
}

fn sinusoidal_pe(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = (pos as f64 * rate).sin();
            pe[pos * d + 2 * i + 1] = (pos as f64 * rate).cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + d - 1] = (pos as f64 * rate).sin();
        }
    }
    pe
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"UBCK";
const CHECKPOINT_VERSION: u32 = 1;
const FLAG_OPT_STATE: u32 = 1;

/// A complete training snapshot: model, vocabulary, training unigram, and
/// optional optimizer arrays. Round-trips bit-exactly.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub bias_mode: BiasMode,
    pub w_scale: f64,
    pub seed: u64,
    pub step: u64,
    pub vocab: Vocabulary,
    pub unigram: UnigramDistribution,
    pub params: Params,
    pub opt_arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn to_model(&self) -> TransformerModel {
        TransformerModel::from_parts(
            self.config.clone(),
            self.params.clone(),
            self.bias_mode,
            self.w_scale,
            self.seed,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let flags = if self.opt_arrays.is_empty() {
            0
        } else {
            FLAG_OPT_STATE
        };
        w.u32(flags);

        w.u64(self.config.layers as u64);
        w.u64(self.config.heads as u64);
        w.u64(self.config.d_model as u64);
        w.u64(self.config.d_ffn as u64);
        w.f64(self.config.dropout);
        w.u64(self.config.vocab_size as u64);
        w.u64(self.config.max_len as u64);
        w.u32(self.config.lm_mode as u32);

        w.u32(self.bias_mode.code() as u32);
        w.f64(self.w_scale);
        w.u64(self.seed);
        w.u64(self.step);

        w.u32(self.vocab.len() as u32);
        for id in 0..self.vocab.len() as u32 {
            w.string(self.vocab.token(id));
            w.u64(self.vocab.count(id));
        }
        w.f64_slice(self.unigram.probs());

        w.u32(self.params.len() as u32);
        for (name, shape, data) in self.params.iter() {
            w.string(name);
            w.u32(shape.len() as u32);
            for &dim in shape {
                w.u64(dim as u64);
            }
            w.f64_slice(data);
        }

        if flags & FLAG_OPT_STATE != 0 {
            w.u32(self.opt_arrays.len() as u32);
            for (name, data) in &self.opt_arrays {
                w.string(name);
                w.f64_slice(data);
            }
        }

        fs::write(path, w.buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(&buf);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let flags = r.u32()?;

        let config = ModelConfig {
            layers: r.u64()? as usize,
            heads: r.u64()? as usize,
            d_model: r.u64()? as usize,
            d_ffn: r.u64()? as usize,
            dropout: r.f64()?,
            vocab_size: r.u64()? as usize,
            max_len: r.u64()? as usize,
            lm_mode: r.u32()? != 0,
        };
        let bias_mode = BiasMode::from_code(r.u32()? as u8)?;
        let w_scale = r.f64()?;
        let seed = r.u64()?;
        let step = r.u64()?;

        let vocab_len = r.u32()? as usize;
        let mut vocab = Vocabulary::with_reserved();
        for i in 0..vocab_len {
            let token = r.string()?;
            let count = r.u64()?;
            if i < 4 {
                if vocab.tokens()[i] != token {
                    return Err(Error::Checkpoint(format!(
                        "{}: reserved token {i} is {token:?}",
                        path.display()
                    )));
                }
            } else {
                vocab.push_token(&token)?;
            }
            vocab.set_count(i as u32, count);
        }
        let probs = r.f64_vec(vocab_len)?;
        let unigram = UnigramDistribution::from_probs(probs)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;

        let n_params = r.u32()? as usize;
        let mut params = Params::new();
        for _ in 0..n_params {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.f64_vec(n)?;
            params.register(&name, shape, data);
        }

        let mut opt_arrays = Vec::new();
        if flags & FLAG_OPT_STATE != 0 {
            let n = r.u32()? as usize;
            for _ in 0..n {
                let name = r.string()?;
                opt_arrays.push((name, r.f64_vec_any()?));
            }
        }
        r.finish(path)?;

        Ok(Checkpoint {
            config,
            bias_mode,
            w_scale,
            seed,
            step,
            vocab,
            unigram,
            params,
            opt_arrays,
        })
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn f64_slice(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for &x in xs {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in checkpoint string".into()))
    }

    fn f64_vec(&mut self, expect: usize) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n != expect {
            return Err(Error::Checkpoint(format!(
                "array length {n} where {expect} expected"
            )));
        }
        self.read_f64s(n)
    }

    fn f64_vec_any(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        self.read_f64s(n)
    }

    fn read_f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint(format!("array length {n} overflows"))
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self, path: &Path) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} trailing bytes",
                path.display(),
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, smoothed_target_row};
    use crate::corpus::EOS;
    use crate::rng::stream;
    use rand::Rng;

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ffn: 16,
            dropout: 0.0,
            vocab_size: vocab,
            max_len: 16,
            lm_mode: false,
        }
    }

    fn uniform_unigram(v: usize) -> UnigramDistribution {
        UnigramDistribution::from_probs(vec![1.0 / v as f64; v]).unwrap()
    }

    fn skewed_unigram(v: usize, seed: u64) -> UnigramDistribution {
        let mut rng = stream(seed, "unigram-fixture", 0);
        let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        UnigramDistribution::from_probs(raw.iter().map(|x| x / total).collect()).unwrap()
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut cfg = tiny_config(12);
        cfg.d_model = 10;
        cfg.heads = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_rejects_zero_layers() {
        let mut cfg = tiny_config(12);
        cfg.layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn log_unigram_init_matches_norms_exactly() {
        let v = 32;
        let u = skewed_unigram(v, 5);
        let model =
            TransformerModel::new(tiny_config(v), &BiasInit::log_unigram(u), 11).unwrap();
        let w_norm = l2_norm(model.params.data("out.w"));
        let b_norm = l2_norm(model.params.data("out.b"));
        assert!(
            ((w_norm - b_norm) / b_norm).abs() < 1e-12,
            "relative mismatch {}",
            ((w_norm - b_norm) / b_norm).abs()
        );
        assert!(model.w_scale != 1.0);
    }

    #[test]
    fn uniform_log_unigram_norm_has_closed_form() {
        let v = 16;
        let model = TransformerModel::new(
            tiny_config(v),
            &BiasInit::log_unigram(uniform_unigram(v)),
            3,
        )
        .unwrap();
        let expected = (v as f64).sqrt() * (v as f64).ln();
        let b_norm = l2_norm(model.params.data("out.b"));
        let w_norm = l2_norm(model.params.data("out.w"));
        assert!((b_norm - expected).abs() < 1e-9);
        assert!(((w_norm - expected) / expected).abs() < 1e-12);
    }

    #[test]
    fn zero_mode_keeps_raw_weights() {
        let v = 16;
        let model = TransformerModel::new(tiny_config(v), &BiasInit::zero(), 3).unwrap();
        assert_eq!(model.w_scale, 1.0);
        assert!(model.params.data("out.b").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_and_none_agree_at_init() {
        let v = 12;
        let zero = TransformerModel::new(tiny_config(v), &BiasInit::zero(), 9).unwrap();
        let none = TransformerModel::new(tiny_config(v), &BiasInit::none(), 9).unwrap();
        assert!(!none.params.contains("out.b"));
        let src = [4u32, 5, 6];
        let prefix = [4u32, 5];
        let a = zero.forward_next_token_dist(&src, &prefix);
        let b = none.forward_next_token_dist(&src, &prefix);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn next_token_dist_is_normalized_and_deterministic() {
        let v = 12;
        let model = TransformerModel::new(
            tiny_config(v),
            &BiasInit::log_unigram(skewed_unigram(v, 2)),
            17,
        )
        .unwrap();
        let src = [4u32, 7, 5, EOS + 2];
        let prefix = [4u32];
        let p1 = model.forward_next_token_dist(&src, &prefix);
        let p2 = model.forward_next_token_dist(&src, &prefix);
        assert_eq!(p1.len(), v);
        assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zeroed_output_weights_reproduce_the_prior() {
        let v = 20;
        let u = skewed_unigram(v, 8);
        let mut model =
            TransformerModel::new(tiny_config(v), &BiasInit::log_unigram(u.clone()), 4).unwrap();
        model.set_output_weights_zero();
        for prefix in [&[][..], &[4u32, 9, 12][..]] {
            let p = model.forward_next_token_dist(&[5u32, 6], prefix);
            for (got, want) in p.iter().zip(u.probs()) {
                assert!(
                    (got - want).abs() < 1e-12,
                    "prior mismatch: {got} vs {want}"
                );
            }
        }
        let (_, prior, combined) = model.decompose_experts(&[5u32, 6], &[4u32]);
        for (c, p) in combined.iter().zip(&prior) {
            assert!((c - p).abs() < 1e-12);
        }
    }

    #[test]
    fn experts_recombine_to_the_full_distribution() {
        let v = 24;
        for (label, init) in [
            ("log_unigram", BiasInit::log_unigram(skewed_unigram(v, 3))),
            ("zero", BiasInit::zero()),
            ("none", BiasInit::none()),
        ] {
            let model = TransformerModel::new(tiny_config(v), &init, 6).unwrap();
            let src = [4u32, 5, 6, 7];
            let prefix = [6u32, 4];
            let (ctx, prior, combined) = model.decompose_experts(&src, &prefix);
            let full = model.forward_next_token_dist(&src, &prefix);
            let product = normalize_product(&ctx, &prior);
            for i in 0..v {
                assert!(
                    (combined[i] - product[i]).abs() < 1e-12,
                    "{label}: product rule broken at {i}: {} vs {}",
                    combined[i],
                    product[i]
                );
                assert!(
                    (combined[i] - full[i]).abs() < 1e-12,
                    "{label}: combined differs from forward at {i}"
                );
            }
            if matches!(init.mode, BiasMode::Zero | BiasMode::None) {
                let uniform = 1.0 / v as f64;
                for p in &prior {
                    assert!((p - uniform).abs() < 1e-12, "{label}: prior not uniform");
                }
            }
        }
    }

    #[test]
    fn poe_identity_holds_for_random_logit_pairs() {
        let mut rng = stream(31, "poe-pairs", 0);
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let joint: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let lhs = softmax_slice(&joint);
            let rhs = normalize_product(&softmax_slice(&x), &softmax_slice(&y));
            for (a, b) in lhs.iter().zip(&rhs) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn relabeling_the_vocabulary_permutes_the_distribution() {
        let v = 10;
        let mut model =
            TransformerModel::new(tiny_config(v), &BiasInit::log_unigram(skewed_unigram(v, 12)), 21)
                .unwrap();
        let src = [4u32, 6, 8];
        let prefix = [5u32, 9];
        let base = model.forward_next_token_dist(&src, &prefix);

        // Permute content ids only; reserved ids keep their meaning.
        let perm: Vec<usize> = vec![0, 1, 2, 3, 7, 4, 9, 6, 5, 8];
        let d = model.config.d_model;
        let old_embed = model.params.data("embed").to_vec();
        let old_w = model.params.data("out.w").to_vec();
        let old_b = model.params.data("out.b").to_vec();
        for (new_id, &old_id) in perm.iter().enumerate() {
            model.params.data_mut("embed")[new_id * d..(new_id + 1) * d]
                .copy_from_slice(&old_embed[old_id * d..(old_id + 1) * d]);
            model.params.data_mut("out.w")[new_id * d..(new_id + 1) * d]
                .copy_from_slice(&old_w[old_id * d..(old_id + 1) * d]);
            model.params.data_mut("out.b")[new_id] = old_b[old_id];
        }
        let inverse: Vec<u32> = {
            let mut inv = vec![0u32; v];
            for (new_id, &old_id) in perm.iter().enumerate() {
                inv[old_id] = new_id as u32;
            }
            inv
        };
        let src2: Vec<u32> = src.iter().map(|&t| inverse[t as usize]).collect();
        let prefix2: Vec<u32> = prefix.iter().map(|&t| inverse[t as usize]).collect();
        let permuted = model.forward_next_token_dist(&src2, &prefix2);
        for (new_id, &old_id) in perm.iter().enumerate() {
            assert!(
                (permuted[new_id] - base[old_id]).abs() < 1e-12,
                "token {old_id} -> {new_id}: {} vs {}",
                permuted[new_id],
                base[old_id]
            );
        }
    }

    #[test]
    fn teacher_forced_rows_match_stepwise_decoding() {
        let v = 14;
        let model = TransformerModel::new(
            tiny_config(v),
            &BiasInit::log_unigram(skewed_unigram(v, 7)),
            13,
        )
        .unwrap();
        let src = [4u32, 10, 5];
        let tgt = [6u32, 11, 4, EOS];
        let rows = model.teacher_forced_log_probs(&src, &tgt, true);
        assert_eq!(rows.len(), tgt.len());
        let enc = model.encode_source(&src);
        for t in 0..tgt.len() {
            let step = model.next_token_logprobs(&enc, &tgt[..t]);
            for (a, b) in rows[t].iter().zip(&step) {
                assert!((a - b).abs() < 1e-12, "row {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn excluding_the_bias_changes_only_the_offset() {
        let v = 10;
        let model = TransformerModel::new(
            tiny_config(v),
            &BiasInit::log_unigram(skewed_unigram(v, 9)),
            2,
        )
        .unwrap();
        let src = [4u32, 5];
        let tgt = [5u32, EOS];
        let with = model.teacher_forced_log_probs(&src, &tgt, true);
        let without = model.teacher_forced_log_probs(&src, &tgt, false);
        let b = model.params.data("out.b");
        // log softmax(z + b) - log softmax(z) = b - c for a row constant c.
        for (wr, nr) in with.iter().zip(&without) {
            let c0 = wr[0] - nr[0] - b[0];
            for j in 1..v {
                let cj = wr[j] - nr[j] - b[j];
                assert!((cj - c0).abs() < 1e-9, "offset not constant: {cj} vs {c0}");
            }
        }
    }

    #[test]
    fn lm_mode_drops_encoder_and_cross_attention() {
        let mut cfg = tiny_config(12);
        cfg.lm_mode = true;
        let model = TransformerModel::new(cfg, &BiasInit::zero(), 5).unwrap();
        assert!(!model.params.contains("enc0.attn.wq"));
        assert!(!model.params.contains("dec0.cross_attn.wq"));
        let p = model.forward_next_token_dist(&[], &[4u32, 5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // The source must be irrelevant.
        let q = model.forward_next_token_dist(&[7u32, 8, 9], &[4u32, 5]);
        for (a, b) in p.iter().zip(&q) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dropout_is_train_only_and_seeded() {
        let v = 12;
        let mut cfg = tiny_config(v);
        cfg.dropout = 0.3;
        let model = TransformerModel::new(cfg, &BiasInit::zero(), 19).unwrap();
        let src = [4u32, 5, 6];
        let tgt = [7u32, EOS];

        let eval_logits = {
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape, false);
            let id = staged.logits(&mut tape, &src, &tgt, &mut None);
            tape.data(id).to_vec()
        };
        let train_logits = |seed: u64| {
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape, false);
            let mut rng = stream(seed, "dropout-test", 0);
            let id = staged.logits(&mut tape, &src, &tgt, &mut Some(&mut rng));
            tape.data(id).to_vec()
        };
        let a = train_logits(1);
        let b = train_logits(1);
        let c = train_logits(2);
        assert_eq!(a, b, "same dropout stream must reproduce bitwise");
        assert_ne!(a, c, "different dropout streams should differ");
        assert_ne!(a, eval_logits, "train mode should differ from eval");
    }

    #[test]
    fn full_model_loss_passes_gradcheck() {
        let v = 9;
        let model = TransformerModel::new(tiny_config(v), &BiasInit::zero(), 23).unwrap();
        let specs = model.param_specs();
        let batch: Vec<(Vec<u32>, Vec<u32>)> = vec![
            (vec![4, 5, 6], vec![6, 5, EOS]),
            (vec![7, 8], vec![8, EOS]),
        ];
        let total_tokens: usize = batch.iter().map(|(_, t)| t.len()).sum();
        let names: Vec<String> = specs.iter().map(|(n, _, _)| n.clone()).collect();

        let report = gradcheck(
            |tape, ids| {
                let map: HashMap<String, TensorId> = names
                    .iter()
                    .cloned()
                    .zip(ids.iter().copied())
                    .collect();
                let staged = model.stage_from_ids(tape, map);
                let mut losses = Vec::new();
                for (src, tgt) in &batch {
                    let logits = staged.logits(tape, src, tgt, &mut None);
                    let q: Vec<f64> = tgt
                        .iter()
                        .flat_map(|&y| smoothed_target_row(y as usize, 0.1, v))
                        .collect();
                    let qid = tape.constant(q, vec![tgt.len(), v]);
                    losses.push(tape.cross_entropy_rows(logits, qid, false));
                }
                let mut total = losses[0];
                for &l in &losses[1..] {
                    total = tape.add(total, l);
                }
                tape.scale(total, 1.0 / total_tokens as f64)
            },
            &specs,
            1e-5,
            1e-5,
            Some(2),
            77,
        );
        assert!(
            report.passed(),
            "worst {:?}",
            report.failures().next()
        );
    }

    #[test]
    #[should_panic(expected = "exceeds max_len")]
    fn overlong_sequences_panic() {
        let mut cfg = tiny_config(8);
        cfg.max_len = 4;
        let model = TransformerModel::new(cfg, &BiasInit::zero(), 1).unwrap();
        model.forward_next_token_dist(&[4u32, 5, 6, 7, 4], &[4u32]);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let v = 16;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ubck");
        let u = skewed_unigram(v, 14);
        let model =
            TransformerModel::new(tiny_config(v), &BiasInit::log_unigram(u.clone()), 33).unwrap();

        let mut vocab = Vocabulary::with_reserved();
        for i in 0..v - 4 {
            vocab.push_token(&format!("w{i:03}")).unwrap();
        }
        for id in 0..v as u32 {
            vocab.set_count(id, (id as u64) * 7 + 1);
        }
        let opt_arrays: Vec<(String, Vec<f64>)> = model
            .params
            .iter()
            .flat_map(|(name, _, data)| {
                let m: Vec<f64> = data.iter().map(|x| x * 0.5 + 0.125).collect();
                let vvec: Vec<f64> = data.iter().map(|x| x * x).collect();
                [
                    (format!("adam.m.{name}"), m),
                    (format!("adam.v.{name}"), vvec),
                ]
            })
            .collect();

        let ck = Checkpoint {
            config: model.config.clone(),
            bias_mode: model.bias_mode,
            w_scale: model.w_scale,
            seed: model.seed,
            step: 412,
            vocab,
            unigram: u,
            params: model.params.clone(),
            opt_arrays,
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        assert_eq!(back.config, ck.config);
        assert_eq!(back.bias_mode, ck.bias_mode);
        assert_eq!(back.w_scale.to_bits(), ck.w_scale.to_bits());
        assert_eq!(back.seed, ck.seed);
        assert_eq!(back.step, 412);
        assert_eq!(back.vocab.tokens(), ck.vocab.tokens());
        for id in 0..v as u32 {
            assert_eq!(back.vocab.count(id), ck.vocab.count(id));
        }
        for (a, b) in back.unigram.probs().iter().zip(ck.unigram.probs()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.params.len(), ck.params.len());
        for ((n1, s1, d1), (n2, s2, d2)) in back.params.iter().zip(ck.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            for (a, b) in d1.iter().zip(d2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(back.opt_arrays.len(), ck.opt_arrays.len());
        for ((n1, d1), (n2, d2)) in back.opt_arrays.iter().zip(&ck.opt_arrays) {
            assert_eq!(n1, n2);
            for (a, b) in d1.iter().zip(d2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        let reloaded = back.to_model();
        let p1 = ck.to_model().forward_next_token_dist(&[4u32, 5], &[6u32]);
        let p2 = reloaded.forward_next_token_dist(&[4u32, 5], &[6u32]);
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_load_rejects_corruption() {
        let v = 8;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ubck");
        let model = TransformerModel::new(tiny_config(v), &BiasInit::zero(), 1).unwrap();
        let mut vocab = Vocabulary::with_reserved();
        for i in 0..v - 4 {
            vocab.push_token(&format!("w{i:03}")).unwrap();
        }
        let ck = Checkpoint {
            config: model.config.clone(),
            bias_mode: model.bias_mode,
            w_scale: model.w_scale,
            seed: model.seed,
            step: 0,
            vocab,
            unigram: uniform_unigram(v),
            params: model.params.clone(),
            opt_arrays: Vec::new(),
        };
        ck.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint(_))
        ));

        let mut truncated = std::fs::read(&path).unwrap();
        truncated[0] = b'U';
        truncated.truncate(truncated.len() - 9);
        std::fs::write(&path, &truncated).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
