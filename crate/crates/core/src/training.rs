//! Training loop: Adam with bias correction, inverse-square-root schedule
//! with linear warmup, label-smoothed NLL or the anti-unigram objective,
//! greedy-decoding validation BLEU with early stopping, and the
//! training-dynamics probes (divergence from unigram/uniform/empirical,
//! bias drift).
//!
//! All KL divergences follow the artifact-wide convention
//! KL(a‖b) = Σ a·ln(a/b).

use std::collections::HashMap;
use std::io::Write as IoWrite;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{smoothed_target_row, Tape, TensorId};
use crate::corpus::{ParallelCorpus, UnigramDistribution, Vocabulary, EOS};
use crate::decoding::greedy_decode;
use crate::error::{Error, Result};
use crate::metrics::{bleu, kl_divergence, mean_and_stderr};
use crate::model::{Checkpoint, Params, StagedModel, TransformerModel};
use crate::rng::stream;

/// Number of training positions each probe evaluates.
pub const PROBE_POSITIONS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    pub lambda: f64,
    /// Step at which training switches back to the standard objective.
    /// Steps before it use the anti-unigram objective.
    pub switch_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Batch budget in target tokens.
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Early stopping after this many evaluations without a new best.
    pub patience: u64,
    pub alpha: f64,
    pub regularizer: Option<Regularizer>,
    pub probe_every: u64,
    pub seed: u64,
}

impl TrainingConfig {
    /// Desk-scale defaults; callers set `max_steps` and `seed`.
    pub fn desk() -> Self {
        TrainingConfig {
            base_lr: 2e-3,
            warmup_steps: 400,
            betas: (0.9, 0.997),
            eps: 1e-8,
            batch_tokens: 256,
            max_steps: 2000,
            eval_every: 200,
            patience: 5,
            alpha: 0.1,
            regularizer: None,
            probe_every: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} not in [0, 1)", self.alpha)));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config(format!(
                "base learning rate {} must be positive",
                self.base_lr
            )));
        }
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        if self.eval_every == 0 || self.probe_every == 0 {
            return Err(Error::Config(
                "eval_every and probe_every must be positive".into(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("betas {:?} not in [0, 1)", self.betas)));
        }
        if let Some(reg) = &self.regularizer {
            if reg.lambda <= 0.0 {
                return Err(Error::Config(format!(
                    "regularizer lambda {} must be positive",
                    reg.lambda
                )));
            }
            if reg.switch_step >= self.max_steps && self.max_steps > 0 {
                return Err(Error::Config(format!(
                    "regularizer switch step {} must come before max steps {}",
                    reg.switch_step, self.max_steps
                )));
            }
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup; `t` counts from 1.
/// Peaks at `base` when t equals the warmup length.
pub fn lr_at(base: f64, warmup_steps: u64, t: u64) -> f64 {
    assert!(t >= 1, "schedule is defined for steps >= 1");
    let w = warmup_steps.max(1) as f64;
    let t = t as f64;
    base * (t / w).min((w / t).sqrt())
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First and second moment estimates, aligned with parameter registration
/// order. `t` counts completed updates for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    slots: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        AdamState {
            t: 0,
            slots: params
                .iter()
                .map(|(name, _, data)| {
                    (name.to_string(), vec![0.0; data.len()], vec![0.0; data.len()])
                })
                .collect(),
        }
    }

    /// Flattens to named arrays for checkpoint embedding.
    pub fn to_opt_arrays(&self) -> Vec<(String, Vec<f64>)> {
        self.slots
            .iter()
            .flat_map(|(name, m, v)| {
                [
                    (format!("adam.m.{name}"), m.clone()),
                    (format!("adam.v.{name}"), v.clone()),
                ]
            })
            .collect()
    }

    pub fn from_opt_arrays(
        arrays: &[(String, Vec<f64>)],
        params: &Params,
        t: u64,
    ) -> Result<Self> {
        let lookup: HashMap<&str, &Vec<f64>> =
            arrays.iter().map(|(n, d)| (n.as_str(), d)).collect();
        let mut slots = Vec::with_capacity(params.len());
        for (name, _, data) in params.iter() {
            let m = lookup
                .get(format!("adam.m.{name}").as_str())
                .ok_or_else(|| {
                    Error::Checkpoint(format!("missing optimizer moment for {name}"))
                })?;
            let v = lookup
                .get(format!("adam.v.{name}").as_str())
                .ok_or_else(|| {
                    Error::Checkpoint(format!("missing optimizer variance for {name}"))
                })?;
            if m.len() != data.len() || v.len() != data.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer arrays for {name} have wrong length"
                )));
            }
            slots.push((name.to_string(), (*m).clone(), (*v).clone()));
        }
        Ok(AdamState { t, slots })
    }
}

/// One Adam update with bias-corrected moments. `grads` must align with the
/// parameter registration order. A non-finite gradient aborts with the
/// offending parameter's name.
pub fn adam_step(
    params: &mut Params,
    grads: &[(String, Vec<f64>)],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    assert_eq!(
        grads.len(),
        state.slots.len(),
        "gradient list does not match optimizer state"
    );
    let step = state.t + 1;
    let (b1, b2) = betas;
    let corr1 = 1.0 - b1.powi(step as i32);
    let corr2 = 1.0 - b2.powi(step as i32);

    // Validate every gradient before touching any parameter, so an abort
    // leaves the previous state intact.
    for (g_name, g) in grads {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                step,
                param: format!("{g_name}[{i}]"),
            });
        }
    }

    for ((g_name, g), (s_name, m, v)) in grads.iter().zip(&mut state.slots) {
        assert_eq!(g_name, s_name, "gradient order mismatch");
        let data = params.data_mut(g_name);
        assert_eq!(data.len(), g.len(), "gradient length mismatch for {g_name}");
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.t = step;
    Ok(())
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// Per-position target weighting for the loss.
#[derive(Debug, Clone)]
pub enum Objective<'a> {
    /// Label-smoothed NLL: q = (1-α)·onehot + α/V.
    LabelSmoothed { alpha: f64 },
    /// Anti-unigram objective per token:
    /// KL(onehot ‖ p) − λ·KL(ω ‖ p), which reduces to cross-entropy against
    /// q = onehot − λ·ω plus the constant λ·H(ω).
    AntiUnigram { omega: &'a [f64], lambda: f64 },
}

impl<'a> Objective<'a> {
    fn q_row(&self, target: usize, vocab: usize) -> Vec<f64> {
        match self {
            Objective::LabelSmoothed { alpha } => smoothed_target_row(target, *alpha, vocab),
            Objective::AntiUnigram { omega, lambda } => {
                assert_eq!(omega.len(), vocab, "unigram size mismatch");
                let mut q: Vec<f64> = omega.iter().map(|w| -lambda * w).collect();
                q[target] += 1.0;
                q
            }
        }
    }

    /// Additive constant per token that completes the objective's value
    /// without affecting gradients.
    pub fn constant_per_token(&self) -> f64 {
        match self {
            Objective::LabelSmoothed { .. } => 0.0,
            Objective::AntiUnigram { omega, lambda } => {
                lambda
                    * omega
                        .iter()
                        .filter(|&&w| w > 0.0)
                        .map(|w| -w * w.ln())
                        .sum::<f64>()
            }
        }
    }
}

/// Builds the differentiable batch loss: the mean per-token cross-entropy
/// against the objective's q-rows. Returns the loss node and the token
/// count; add `constant_per_token()` to the node's value to report the full
/// objective.
pub fn batch_loss(
    staged: &StagedModel,
    tape: &mut Tape,
    batch: &[(&[u32], &[u32])],
    objective: &Objective,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> (TensorId, usize) {
    assert!(!batch.is_empty(), "empty batch");
    let vocab = staged.vocab_size();
    let mut total: Option<TensorId> = None;
    let mut tokens = 0usize;
    for (src, tgt) in batch {
        let logits = staged.logits(tape, src, tgt, rng);
        let q: Vec<f64> = tgt
            .iter()
            .flat_map(|&y| objective.q_row(y as usize, vocab))
            .collect();
        let qid = tape.constant(q, vec![tgt.len(), vocab]);
        let loss = tape.cross_entropy_rows(logits, qid, false);
        tokens += tgt.len();
        total = Some(match total {
            Some(acc) => tape.add(acc, loss),
            None => loss,
        });
    }
    let sum = total.expect("batch produced no loss");
    (tape.scale(sum, 1.0 / tokens as f64), tokens)
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceRecord {
    pub step: u64,
    pub kl_unigram: f64,
    pub kl_unigram_se: f64,
    pub kl_uniform: f64,
    pub kl_uniform_se: f64,
    pub xent_empirical: f64,
    pub xent_empirical_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasDriftRecord {
    pub step: u64,
    pub kl_to_unigram: f64,
    pub bias_norm: f64,
}

/// Fixed probe positions: pair indices with the target positions to score.
#[derive(Debug, Clone)]
pub struct ProbeSample {
    groups: Vec<(usize, Vec<usize>)>,
    total: usize,
}

impl ProbeSample {
    pub fn total_positions(&self) -> usize {
        self.total
    }
}

/// Draws a fixed, seeded subset of up to `budget` training positions,
/// grouped by sentence pair so each pair is decoded once per probe.
pub fn draw_probe_sample(
    pairs: &[(Vec<u32>, Vec<u32>)],
    seed: u64,
    budget: usize,
) -> ProbeSample {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut stream(seed, "probe-sample", 0));
    let mut groups = Vec::new();
    let mut total = 0usize;
    for idx in order {
        if total >= budget {
            break;
        }
        let len = pairs[idx].1.len();
        let take = len.min(budget - total);
        groups.push((idx, (0..take).collect()));
        total += take;
    }
    ProbeSample { groups, total }
}

/// Divergence statistics over explicit log-probability rows paired with
/// their target ids. Factored out of the model-driven probe so closed-form
/// oracles can feed rows directly.
pub fn divergence_stats(
    rows: &[(Vec<f64>, usize)],
    unigram: &UnigramDistribution,
    step: u64,
) -> Result<DivergenceRecord> {
    assert!(!rows.is_empty(), "divergence probe needs at least one row");
    let v = unigram.len();
    let uniform = vec![1.0 / v as f64; v];
    let mut kl_u = Vec::with_capacity(rows.len());
    let mut kl_flat = Vec::with_capacity(rows.len());
    let mut xent = Vec::with_capacity(rows.len());
    for (log_row, target) in rows {
        assert_eq!(log_row.len(), v, "probe row width mismatch");
        let p: Vec<f64> = log_row.iter().map(|lp| lp.exp()).collect();
        kl_u.push(kl_divergence(&p, unigram.probs())?);
        kl_flat.push(kl_divergence(&p, &uniform)?);
        xent.push(-log_row[*target]);
    }
    let (kl_unigram, kl_unigram_se) = mean_and_stderr(&kl_u);
    let (kl_uniform, kl_uniform_se) = mean_and_stderr(&kl_flat);
    let (xent_empirical, xent_empirical_se) = mean_and_stderr(&xent);
    Ok(DivergenceRecord {
        step,
        kl_unigram,
        kl_unigram_se,
        kl_uniform,
        kl_uniform_se,
        xent_empirical,
        xent_empirical_se,
    })
}

/// Per-token divergence of the model from the training unigram, from
/// uniform, and from the one-hot empirical targets, with standard errors
/// over the probed positions.
pub fn probe_divergences(
    model: &TransformerModel,
    sample: &ProbeSample,
    pairs: &[(Vec<u32>, Vec<u32>)],
    unigram: &UnigramDistribution,
    step: u64,
) -> Result<DivergenceRecord> {
    let mut rows = Vec::with_capacity(sample.total);
    for (idx, positions) in &sample.groups {
        let (src, tgt) = &pairs[*idx];
        let log_rows = model.teacher_forced_log_probs(src, tgt, true);
        for &pos in positions {
            rows.push((log_rows[pos].clone(), tgt[pos] as usize));
        }
    }
    divergence_stats(&rows, unigram, step)
}

/// Bias drift: KL(softmax(b) ‖ training unigram) and ‖b‖₂. Returns None
/// when the model has no output bias.
pub fn probe_bias_drift(
    model: &TransformerModel,
    unigram: &UnigramDistribution,
    step: u64,
) -> Result<Option<BiasDriftRecord>> {
    if !model.bias_mode.has_bias() {
        return Ok(None);
    }
    let b = model.params.data("out.b");
    let prior = crate::model::softmax_slice(b);
    let kl = kl_divergence(&prior, unigram.probs())?;
    let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(Some(BiasDriftRecord {
        step,
        kl_to_unigram: kl,
        bias_norm: norm,
    }))
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    /// Mean per-token loss at every step, in step order.
    pub losses: Vec<(u64, f64)>,
    /// Validation BLEU at every evaluation step.
    pub val_bleu: Vec<(u64, f64)>,
    pub divergence: Vec<DivergenceRecord>,
    pub bias_drift: Vec<BiasDriftRecord>,
    /// (step, BLEU) of the best checkpoint, when any evaluation ran.
    pub best: Option<(u64, f64)>,
    pub stopped_early: bool,
    /// Parameter (or "loss") that went non-finite, when training aborted.
    pub diverged: Option<String>,
}

impl TrainingLog {
    /// Line-oriented export: `step,kind,field=value,...`.
    pub fn write_records(&self, mut w: impl IoWrite) -> std::io::Result<()> {
        for (step, loss) in &self.losses {
            writeln!(w, "{step},loss,value={loss}")?;
        }
        for (step, score) in &self.val_bleu {
            writeln!(w, "{step},eval,bleu={score}")?;
        }
        for d in &self.divergence {
            writeln!(
                w,
                "{},probe,kl_unigram={},kl_unigram_se={},kl_uniform={},kl_uniform_se={},xent={},xent_se={}",
                d.step,
                d.kl_unigram,
                d.kl_unigram_se,
                d.kl_uniform,
                d.kl_uniform_se,
                d.xent_empirical,
                d.xent_empirical_se
            )?;
        }
        for b in &self.bias_drift {
            writeln!(
                w,
                "{},bias,kl_to_unigram={},bias_norm={}",
                b.step, b.kl_to_unigram, b.bias_norm
            )?;
        }
        if let Some((step, score)) = self.best {
            writeln!(w, "{step},best,bleu={score}")?;
        }
        Ok(())
    }
}

pub struct TrainOutput {
    pub log: TrainingLog,
    /// Parameters at the best validation BLEU (initialization when no
    /// evaluation ever ran). No optimizer state.
    pub best: Checkpoint,
    /// Final state including optimizer arrays; resuming from it continues
    /// the run exactly.
    pub last: Checkpoint,
}

pub struct TrainInputs<'a> {
    pub train: &'a ParallelCorpus,
    pub valid: &'a ParallelCorpus,
    pub vocab: &'a Vocabulary,
    /// Training-side unigram: probe reference, regularizer target, and
    /// checkpoint metadata.
    pub unigram: &'a UnigramDistribution,
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Token-budget batches over length-sorted pairs. Each batch stays within
/// `budget` target tokens unless a single pair alone exceeds it.
pub fn build_batches(pairs: &[(Vec<u32>, Vec<u32>)], budget: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].1.len(), i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0usize;
    for idx in order {
        let cost = pairs[idx].1.len();
        if !current.is_empty() && used + cost > budget {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(idx);
        used += cost;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "batch-order", epoch));
    order
}

// ---------------------------------------------------------------------------
// The loop
// ---------------------------------------------------------------------------

/// Trains from initialization. See [`resume`] for continuing a checkpoint.
pub fn train(
    model: &mut TransformerModel,
    inputs: &TrainInputs,
    cfg: &TrainingConfig,
) -> Result<TrainOutput> {
    let state = AdamState::new(&model.params);
    train_from(model, state, 0, inputs, cfg)
}

/// Continues training from a checkpoint with optimizer state. The step
/// counter, batch order, and dropout streams derive from the step index,
/// so a resumed run is bitwise identical to an uninterrupted one.
pub fn resume(
    checkpoint: &Checkpoint,
    inputs: &TrainInputs,
    cfg: &TrainingConfig,
) -> Result<TrainOutput> {
    let mut model = checkpoint.to_model();
    let state = AdamState::from_opt_arrays(
        &checkpoint.opt_arrays,
        &model.params,
        checkpoint.step,
    )?;
    train_from(&mut model, state, checkpoint.step, inputs, cfg)
}

fn train_from(
    model: &mut TransformerModel,
    mut adam: AdamState,
    start_step: u64,
    inputs: &TrainInputs,
    cfg: &TrainingConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if inputs.train.is_empty() || inputs.valid.is_empty() {
        return Err(Error::Data(
            "training requires non-empty train and validation splits".into(),
        ));
    }
    if model.config.vocab_size != inputs.unigram.len() {
        return Err(Error::Config(format!(
            "model vocab {} does not match unigram size {}",
            model.config.vocab_size,
            inputs.unigram.len()
        )));
    }
    if cfg.regularizer.is_some() {
        if let Some(i) = inputs.unigram.probs().iter().position(|&p| p <= 0.0) {
            return Err(Error::Config(format!(
                "anti-unigram regularizer needs a strictly positive unigram; entry {i} is zero"
            )));
        }
    }

    let pairs = inputs.train.pairs();
    let batches = build_batches(pairs, cfg.batch_tokens);
    let probe_sample = draw_probe_sample(pairs, cfg.seed, PROBE_POSITIONS);
    let grad_order: Vec<String> = model.params.names().map(String::from).collect();

    let mut log = TrainingLog::default();
    let snapshot = |model: &TransformerModel, step: u64, opt: Option<&AdamState>| Checkpoint {
        config: model.config.clone(),
        bias_mode: model.bias_mode,
        w_scale: model.w_scale,
        seed: model.seed,
        step,
        vocab: inputs.vocab.clone(),
        unigram: inputs.unigram.clone(),
        params: model.params.clone(),
        opt_arrays: opt.map(AdamState::to_opt_arrays).unwrap_or_default(),
    };

    if start_step == 0 {
        log.divergence
            .push(probe_divergences(model, &probe_sample, pairs, inputs.unigram, 0)?);
        if let Some(rec) = probe_bias_drift(model, inputs.unigram, 0)? {
            log.bias_drift.push(rec);
        }
    }

    let mut best: Option<(u64, f64, Checkpoint)> = None;
    let mut evals_since_best: u64 = 0;

    'steps: for t in (start_step + 1)..=cfg.max_steps {
        let epoch = (t - 1) / batches.len() as u64;
        let slot = ((t - 1) % batches.len() as u64) as usize;
        let order = epoch_order(batches.len(), cfg.seed, epoch);
        let batch_ids = &batches[order[slot]];
        let batch: Vec<(&[u32], &[u32])> = batch_ids
            .iter()
            .map(|&i| (pairs[i].0.as_slice(), pairs[i].1.as_slice()))
            .collect();

        let objective = match &cfg.regularizer {
            Some(reg) if t < reg.switch_step => Objective::AntiUnigram {
                omega: inputs.unigram.probs(),
                lambda: reg.lambda,
            },
            _ => Objective::LabelSmoothed { alpha: cfg.alpha },
        };

        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, true);
        let mut step_rng = stream(cfg.seed, "dropout", t);
        let mut rng_opt = (model.config.dropout > 0.0).then_some(&mut step_rng);
        let (loss_id, _tokens) = batch_loss(&staged, &mut tape, &batch, &objective, &mut rng_opt);
        let loss_value = tape.scalar(loss_id) + objective.constant_per_token();
        if !loss_value.is_finite() {
            log.diverged = Some("loss".to_string());
            break 'steps;
        }
        tape.backward(loss_id);

        let id_by_name: HashMap<&str, TensorId> = staged.param_ids().collect();
        let mut grads: Vec<(String, Vec<f64>)> = Vec::with_capacity(grad_order.len());
        for name in &grad_order {
            let id = id_by_name[name.as_str()];
            let g = tape
                .grad(id)
                .expect("trainable parameter received no gradient")
                .to_vec();
            grads.push((name.clone(), g));
        }
        drop(tape);

        match adam_step(
            &mut model.params,
            &grads,
            &mut adam,
            lr_at(cfg.base_lr, cfg.warmup_steps, t),
            cfg.betas,
            cfg.eps,
        ) {
            Ok(()) => {}
            Err(Error::Diverged { param, .. }) => {
                log.diverged = Some(param);
                break 'steps;
            }
            Err(e) => return Err(e),
        }
        log.losses.push((t, loss_value));

        if t % cfg.probe_every == 0 {
            log.divergence
                .push(probe_divergences(model, &probe_sample, pairs, inputs.unigram, t)?);
            if let Some(rec) = probe_bias_drift(model, inputs.unigram, t)? {
                log.bias_drift.push(rec);
            }
        }

        if t % cfg.eval_every == 0 {
            let score = validation_bleu(model, inputs.valid)?;
            log.val_bleu.push((t, score));
            let improved = best.as_ref().map_or(true, |(_, b, _)| score > *b);
            if improved {
                best = Some((t, score, snapshot(model, t, None)));
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= cfg.patience {
                    log.stopped_early = true;
                    break 'steps;
                }
            }
        }
    }

    let last_step = log.losses.last().map_or(start_step, |(s, _)| *s);
    let last = snapshot(model, last_step, Some(&adam));
    let (best_ck, best_point) = match best {
        Some((step, score, ck)) => (ck, Some((step, score))),
        None => (snapshot(model, last_step, None), None),
    };
    log.best = best_point;

    Ok(TrainOutput {
        log,
        best: best_ck,
        last,
    })
}

/// Corpus BLEU of greedy decodes against the references, with the trailing
/// EOS stripped from both sides. Greedy keeps the early-stopping signal
/// cheap; final test evaluation uses beam search in the harness.
pub fn validation_bleu(model: &TransformerModel, valid: &ParallelCorpus) -> Result<f64> {
    let mut hyps = Vec::with_capacity(valid.len());
    let mut refs = Vec::with_capacity(valid.len());
    for (src, tgt) in valid.pairs() {
        let cap = decode_cap(model, src.len());
        let hyp = greedy_decode(model, src, cap);
        hyps.push(strip_eos(&hyp.tokens));
        refs.push(strip_eos(tgt));
    }
    bleu(&hyps, &refs, 4)
}

/// Decode-length limit: generous for the synthetic tasks (target length is
/// source length plus EOS) while respecting the positional table.
pub fn decode_cap(model: &TransformerModel, src_len: usize) -> usize {
    (2 * src_len + 4).min(model.config.max_len - 1)
}

pub fn strip_eos(tokens: &[u32]) -> Vec<u32> {
    match tokens.last() {
        Some(&t) if t == EOS => tokens[..tokens.len() - 1].to_vec(),
        _ => tokens.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::model::{BiasInit, ModelConfig};
    use crate::synth::{generate_synthetic_task, SynthSpec, TaskKind};
    use crate::corpus::{estimate_unigram, Split};
    use rand::Rng;

    #[test]
    fn schedule_warms_up_then_decays() {
        let base = 2e-3;
        assert!((lr_at(base, 400, 400) - base).abs() < 1e-18);
        assert!((lr_at(base, 400, 100) - base * 0.25).abs() < 1e-18);
        assert!((lr_at(base, 400, 1600) - base * 0.5).abs() < 1e-12);
        assert!((lr_at(base, 400, 1) - base / 400.0).abs() < 1e-18);
    }

    fn one_param(x: f64) -> Params {
        let mut p = Params::new();
        p.register("x", vec![1], vec![x]);
        p
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = one_param(1.0);
        let mut state = AdamState::new(&params);
        let lr = 0.01;
        adam_step(
            &mut params,
            &[("x".to_string(), vec![0.7])],
            &mut state,
            lr,
            (0.9, 0.997),
            1e-8,
        )
        .unwrap();
        let moved = (params.data("x")[0] - 1.0).abs();
        assert!(
            (moved - lr).abs() < 1e-6,
            "first-step magnitude {moved} should be about {lr}"
        );
    }

    #[test]
    fn adam_with_zero_gradients_changes_nothing() {
        let mut params = one_param(0.37);
        let before = params.data("x")[0].to_bits();
        let mut state = AdamState::new(&params);
        for _ in 0..5 {
            adam_step(
                &mut params,
                &[("x".to_string(), vec![0.0])],
                &mut state,
                0.1,
                (0.9, 0.997),
                1e-8,
            )
            .unwrap();
        }
        assert_eq!(params.data("x")[0].to_bits(), before);
    }

    #[test]
    fn adam_matches_the_scalar_recurrence_on_a_quadratic() {
        let (b1, b2) = (0.9, 0.997);
        let (lr, eps) = (0.1, 1e-8);
        let mut params = one_param(1.0);
        let mut state = AdamState::new(&params);

        // Reference recurrence with plain scalars.
        let (mut xr, mut mr, mut vr) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200u64 {
            let g = 2.0 * xr;
            mr = b1 * mr + (1.0 - b1) * g;
            vr = b2 * vr + (1.0 - b2) * g * g;
            let m_hat = mr / (1.0 - b1.powi(t as i32));
            let v_hat = vr / (1.0 - b2.powi(t as i32));
            xr -= lr * m_hat / (v_hat.sqrt() + eps);

            let gx = 2.0 * params.data("x")[0];
            adam_step(
                &mut params,
                &[("x".to_string(), vec![gx])],
                &mut state,
                lr,
                (b1, b2),
                eps,
            )
            .unwrap();
            assert_eq!(
                params.data("x")[0].to_bits(),
                xr.to_bits(),
                "trajectories split at step {t}"
            );
        }
        assert!(xr.abs() < 1e-3, "x after 200 steps: {xr}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients_without_mutating() {
        let mut params = Params::new();
        params.register("a", vec![2], vec![1.0, 2.0]);
        params.register("b", vec![1], vec![3.0]);
        let before_a = params.data("a").to_vec();
        let mut state = AdamState::new(&params);
        let grads = vec![
            ("a".to_string(), vec![0.5, 0.5]),
            ("b".to_string(), vec![f64::NAN]),
        ];
        match adam_step(&mut params, &grads, &mut state, 0.1, (0.9, 0.997), 1e-8) {
            Err(Error::Diverged { step, param }) => {
                assert_eq!(step, 1);
                assert_eq!(param, "b[0]");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        assert_eq!(params.data("a"), before_a.as_slice());
        assert_eq!(state.t, 0);
    }

    /// Scalar reference for the anti-unigram objective on one position.
    fn anti_unigram_reference(p_theta: &[f64], target: usize, omega: &[f64], lambda: f64) -> f64 {
        let kl_empirical = -p_theta[target].ln();
        let kl_omega: f64 = omega
            .iter()
            .zip(p_theta)
            .map(|(w, p)| if *w > 0.0 { w * (w / p).ln() } else { 0.0 })
            .sum();
        kl_empirical - lambda * kl_omega
    }

    fn objective_value_on_row(p_theta: &[f64], target: usize, objective: &Objective) -> f64 {
        let v = p_theta.len();
        let mut tape = Tape::new();
        let logits = tape.constant(p_theta.iter().map(|p| p.ln()).collect(), vec![1, v]);
        let q = tape.constant(objective.q_row(target, v), vec![1, v]);
        let node = tape.cross_entropy_rows(logits, q, false);
        tape.scalar(node) + objective.constant_per_token()
    }

    #[test]
    fn anti_unigram_loss_matches_the_closed_form() {
        let p_theta = [0.5, 0.3, 0.2];
        let omega = [0.6, 0.3, 0.1];
        let lambda = 0.5;
        let got = objective_value_on_row(
            &p_theta,
            0,
            &Objective::AntiUnigram {
                omega: &omega,
                lambda,
            },
        );
        let want = anti_unigram_reference(&p_theta, 0, &omega, lambda);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        // Literal transcription of the worked example.
        let explicit = (1.0f64 / 0.5).ln()
            - 0.5
                * (0.6 * (0.6f64 / 0.5).ln()
                    + 0.3 * (0.3f64 / 0.3).ln()
                    + 0.1 * (0.1f64 / 0.2).ln());
        assert!((got - explicit).abs() < 1e-12, "{got} vs {explicit}");
    }

    #[test]
    fn anti_unigram_with_zero_lambda_is_plain_nll() {
        let p_theta = [0.5, 0.3, 0.2];
        let omega = [0.6, 0.3, 0.1];
        let anti = objective_value_on_row(
            &p_theta,
            1,
            &Objective::AntiUnigram {
                omega: &omega,
                lambda: 0.0,
            },
        );
        let plain = objective_value_on_row(&p_theta, 1, &Objective::LabelSmoothed { alpha: 0.0 });
        assert!((anti - plain).abs() < 1e-15);
        assert!((anti - (1.0f64 / 0.3).ln()).abs() < 1e-12);
    }

    #[test]
    fn anti_unigram_at_omega_reduces_to_the_empirical_term() {
        let omega = [0.6, 0.3, 0.1];
        let got = objective_value_on_row(
            &omega,
            0,
            &Objective::AntiUnigram {
                omega: &omega,
                lambda: 0.8,
            },
        );
        assert!((got - (1.0f64 / 0.6).ln()).abs() < 1e-12);
    }

    #[test]
    fn regularizer_gradient_escapes_the_unigram_while_decreasing_loss() {
        // Start the model distribution exactly at the unigram; the gradient
        // step must lower the objective while increasing KL(omega || p).
        let omega = [0.6_f64, 0.3, 0.1];
        let lambda = 2.0;
        let loss = |z: &[f64]| {
            let p = crate::model::softmax_slice(z);
            anti_unigram_reference(&p, 0, &omega, lambda)
        };
        let z0: Vec<f64> = omega.iter().map(|w| w.ln()).collect();
        // d/dz of -sum(q * log softmax(z)) with q = onehot - lambda*omega:
        // (1 - lambda) * p - q.
        let p0 = crate::model::softmax_slice(&z0);
        let grad: Vec<f64> = (0..3)
            .map(|i| {
                let q = if i == 0 { 1.0 } else { 0.0 } - lambda * omega[i];
                (1.0 - lambda) * p0[i] - q
            })
            .collect();
        let eta = 1e-3;
        let z1: Vec<f64> = z0.iter().zip(&grad).map(|(z, g)| z - eta * g).collect();
        let p1 = crate::model::softmax_slice(&z1);
        assert!(
            loss(&z1) < loss(&z0),
            "step along the gradient should reduce the objective"
        );
        let drift = kl_divergence(&omega, &p1).unwrap();
        assert!(
            drift > 1e-9,
            "the model should have moved away from the unigram (KL {drift})"
        );
    }

    fn tiny_model(vocab: usize, dropout: f64, seed: u64) -> TransformerModel {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ffn: 32,
            dropout,
            vocab_size: vocab,
            max_len: 16,
            lm_mode: false,
        };
        TransformerModel::new(cfg, &BiasInit::zero(), seed).unwrap()
    }

    #[test]
    fn full_training_loss_passes_finite_difference_checks() {
        let v = 9;
        let model = tiny_model(v, 0.0, 41);
        let specs = model.param_specs();
        let names: Vec<String> = specs.iter().map(|(n, _, _)| n.clone()).collect();
        let batch_owned: Vec<(Vec<u32>, Vec<u32>)> = vec![
            (vec![4, 5, 6], vec![6, 5, EOS]),
            (vec![7, 8], vec![8, EOS]),
        ];
        let mut omega = vec![0.0; v];
        {
            let mut rng = stream(3, "gc-omega", 0);
            let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for (o, r) in omega.iter_mut().zip(raw) {
                *o = r / total;
            }
        }

        let check = |objective: Objective, dropout_seed: Option<u64>| {
            let report = gradcheck(
                |tape, ids| {
                    let map: HashMap<String, TensorId> = names
                        .iter()
                        .cloned()
                        .zip(ids.iter().copied())
                        .collect();
                    let staged = model.stage_from_ids(tape, map);
                    let batch: Vec<(&[u32], &[u32])> = batch_owned
                        .iter()
                        .map(|(s, t)| (s.as_slice(), t.as_slice()))
                        .collect();
                    let mut rng_store =
                        dropout_seed.map(|s| stream(s, "gc-dropout", 0));
                    let mut rng_opt = rng_store.as_mut();
                    let (loss, _) = batch_loss(&staged, tape, &batch, &objective, &mut rng_opt);
                    loss
                },
                &specs,
                1e-5,
                1e-4,
                Some(2),
                91,
            );
            assert!(
                report.passed(),
                "objective {:?}: worst {:?}",
                objective,
                report.failures().next()
            );
        };

        check(Objective::LabelSmoothed { alpha: 0.1 }, None);
        check(
            Objective::AntiUnigram {
                omega: &omega,
                lambda: 0.7,
            },
            None,
        );
        check(Objective::LabelSmoothed { alpha: 0.1 }, Some(5));
    }

    #[test]
    fn batches_cover_every_pair_within_budget() {
        let mut rng = stream(8, "batch-test", 0);
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..57)
            .map(|_| {
                let n = rng.gen_range(2..9);
                (vec![4; n], vec![4; n])
            })
            .collect();
        let budget = 16;
        let batches = build_batches(&pairs, budget);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..pairs.len()).collect::<Vec<_>>());
        for batch in &batches {
            let tokens: usize = batch.iter().map(|&i| pairs[i].1.len()).sum();
            assert!(
                tokens <= budget || batch.len() == 1,
                "batch of {tokens} tokens exceeds budget"
            );
        }
        // Length-sorted construction: batch boundaries never decrease.
        let firsts: Vec<usize> = batches.iter().map(|b| pairs[b[0]].1.len()).collect();
        let mut sorted = firsts.clone();
        sorted.sort_unstable();
        assert_eq!(firsts, sorted);
    }

    #[test]
    fn probe_sample_is_fixed_and_budgeted() {
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..300)
            .map(|i| {
                let n = 2 + (i % 5);
                (vec![4; n], vec![4; n])
            })
            .collect();
        let a = draw_probe_sample(&pairs, 5, PROBE_POSITIONS);
        let b = draw_probe_sample(&pairs, 5, PROBE_POSITIONS);
        assert_eq!(a.groups, b.groups);
        assert_eq!(a.total_positions(), PROBE_POSITIONS);
        let small: Vec<(Vec<u32>, Vec<u32>)> = pairs[..10].to_vec();
        let c = draw_probe_sample(&small, 5, PROBE_POSITIONS);
        let all: usize = small.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(c.total_positions(), all);
    }

    #[test]
    fn divergence_stats_match_the_two_token_oracle() {
        let u = UnigramDistribution::from_probs(vec![0.75, 0.25]).unwrap();
        let row = vec![(0.5f64).ln(); 2];
        let rows = vec![(row.clone(), 0), (row, 1)];
        let rec = divergence_stats(&rows, &u, 7).unwrap();
        let want = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((rec.kl_unigram - want).abs() < 1e-12);
        assert!((want - 0.1438).abs() < 1e-4);
        assert!(rec.kl_uniform.abs() < 1e-15);
        assert!((rec.xent_empirical - (2.0f64).ln()).abs() < 1e-12);
        assert!(rec.xent_empirical_se.abs() < 1e-15);
        assert_eq!(rec.step, 7);
    }

    // `vocab` throughout these helpers is the total model vocabulary; the
    // synthetic task generator wants the content count, which excludes the
    // four reserved ids.
    fn toy_corpus(vocab: usize, keep: usize, seed: u64, split: Split) -> ParallelCorpus {
        let spec = SynthSpec {
            kind: TaskKind::Copy,
            vocab_size: vocab - crate::corpus::RESERVED.len(),
            zipf_s: 1.0,
            pairs: 100.max(keep),
            len_range: (3, 4),
            seed,
            split,
        };
        let full = generate_synthetic_task(&spec).unwrap().0;
        ParallelCorpus::from_id_pairs(full.pairs()[..keep].to_vec(), vocab, split).unwrap()
    }

    #[test]
    fn w_zero_diagnostic_probes_at_zero_divergence() {
        let v = 16;
        let train = toy_corpus(v, 40, 11, Split::Train);
        let unigram = estimate_unigram(&train.targets(), v, 1.0).unwrap();
        let mut model = TransformerModel::new(
            ModelConfig {
                layers: 1,
                heads: 2,
                d_model: 16,
                d_ffn: 32,
                dropout: 0.0,
                vocab_size: v,
                max_len: 16,
                lm_mode: false,
            },
            &BiasInit::log_unigram(unigram.clone()),
            6,
        )
        .unwrap();
        model.set_output_weights_zero();
        let sample = draw_probe_sample(train.pairs(), 4, 64);
        let rec = probe_divergences(&model, &sample, train.pairs(), &unigram, 0).unwrap();
        assert!(
            rec.kl_unigram < 1e-10,
            "kl to unigram {} should vanish",
            rec.kl_unigram
        );
        assert!(rec.kl_uniform > 0.0);
    }

    #[test]
    fn bias_drift_probe_matches_init_closed_forms() {
        let v = 12;
        let mut probs = vec![0.0; v];
        let mut rng = stream(9, "drift-unigram", 0);
        let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for (p, r) in probs.iter_mut().zip(raw) {
            *p = r / total;
        }
        let u = UnigramDistribution::from_probs(probs).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ffn: 16,
            dropout: 0.0,
            vocab_size: v,
            max_len: 8,
            lm_mode: false,
        };

        let logu = TransformerModel::new(cfg.clone(), &BiasInit::log_unigram(u.clone()), 3).unwrap();
        let rec = probe_bias_drift(&logu, &u, 0).unwrap().unwrap();
        assert!(rec.kl_to_unigram < 1e-12, "kl {}", rec.kl_to_unigram);
        let expected_norm = u
            .probs()
            .iter()
            .map(|p| p.ln() * p.ln())
            .sum::<f64>()
            .sqrt();
        assert!((rec.bias_norm - expected_norm).abs() < 1e-12);

        let zero = TransformerModel::new(cfg.clone(), &BiasInit::zero(), 3).unwrap();
        let rec = probe_bias_drift(&zero, &u, 0).unwrap().unwrap();
        let uniform = vec![1.0 / v as f64; v];
        let want = kl_divergence(&uniform, u.probs()).unwrap();
        assert!((rec.kl_to_unigram - want).abs() < 1e-12);
        assert_eq!(rec.bias_norm, 0.0);

        let none = TransformerModel::new(cfg, &BiasInit::none(), 3).unwrap();
        assert!(probe_bias_drift(&none, &u, 0).unwrap().is_none());
    }

    fn tiny_inputs(
        vocab: usize,
        seed: u64,
    ) -> (ParallelCorpus, ParallelCorpus, Vocabulary, UnigramDistribution) {
        let train = toy_corpus(vocab, 60, seed, Split::Train);
        let valid = toy_corpus(vocab, 16, seed, Split::Valid);
        let vocab_table = crate::synth::synthetic_vocabulary(vocab - crate::corpus::RESERVED.len());
        let unigram = estimate_unigram(&train.targets(), vocab, 1.0).unwrap();
        (train, valid, vocab_table, unigram)
    }

    fn tiny_train_cfg(seed: u64, max_steps: u64) -> TrainingConfig {
        TrainingConfig {
            base_lr: 1e-3,
            warmup_steps: 10,
            betas: (0.9, 0.997),
            eps: 1e-8,
            batch_tokens: 48,
            max_steps,
            eval_every: 8,
            patience: 50,
            alpha: 0.1,
            regularizer: None,
            probe_every: 12,
            seed,
        }
    }

    #[test]
    fn zero_step_training_logs_the_init_probe_only() {
        let (train_c, valid, vocab_table, unigram) = tiny_inputs(14, 21);
        let inputs = TrainInputs {
            train: &train_c,
            valid: &valid,
            vocab: &vocab_table,
            unigram: &unigram,
        };
        let mut model = tiny_model(14, 0.1, 5);
        let before = model.params.clone();
        let out = train(&mut model, &inputs, &tiny_train_cfg(4, 0)).unwrap();
        assert!(out.log.losses.is_empty());
        assert!(out.log.val_bleu.is_empty());
        assert_eq!(out.log.divergence.len(), 1);
        assert_eq!(out.log.divergence[0].step, 0);
        assert_eq!(out.log.bias_drift.len(), 1);
        assert!(out.log.best.is_none());
        assert_eq!(out.best.params, before);
        assert_eq!(out.best.step, 0);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (train_c, valid, vocab_table, unigram) = tiny_inputs(14, 33);
        let inputs = TrainInputs {
            train: &train_c,
            valid: &valid,
            vocab: &vocab_table,
            unigram: &unigram,
        };
        let cfg = tiny_train_cfg(17, 24);
        let run = || {
            let mut model = tiny_model(14, 0.1, 29);
            train(&mut model, &inputs, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        assert_eq!(a.last.params, b.last.params);
        assert_eq!(a.best.params, b.best.params);

        // Log series are strictly increasing in step, and the reported best
        // equals the max of the validation series.
        for w in a.log.losses.windows(2) {
            assert!(w[0].0 < w[1].0);
        }
        for w in a.log.divergence.windows(2) {
            assert!(w[0].step < w[1].step);
        }
        let (best_step, best_score) = a.log.best.unwrap();
        let max = a
            .log
            .val_bleu
            .iter()
            .fold(f64::NEG_INFINITY, |m, (_, s)| m.max(*s));
        assert_eq!(best_score, max);
        assert!(a.log.val_bleu.iter().any(|&(s, v)| s == best_step && v == best_score));
    }

    #[test]
    fn resuming_reproduces_the_uninterrupted_run() {
        let (train_c, valid, vocab_table, unigram) = tiny_inputs(14, 57);
        let inputs = TrainInputs {
            train: &train_c,
            valid: &valid,
            vocab: &vocab_table,
            unigram: &unigram,
        };
        let mut cfg = tiny_train_cfg(23, 24);
        cfg.eval_every = 50; // keep both paths eval-free
        cfg.probe_every = 50;

        let full = {
            let mut model = tiny_model(14, 0.1, 31);
            train(&mut model, &inputs, &cfg).unwrap()
        };

        let mut half_cfg = cfg.clone();
        half_cfg.max_steps = 12;
        let half = {
            let mut model = tiny_model(14, 0.1, 31);
            train(&mut model, &inputs, &half_cfg).unwrap()
        };
        let resumed = resume(&half.last, &inputs, &cfg).unwrap();

        assert_eq!(resumed.last.params, full.last.params);
        assert_eq!(resumed.last.step, full.last.step);
        assert_eq!(resumed.log.losses, full.log.losses[12..].to_vec());
    }

    #[test]
    fn training_log_records_are_line_oriented() {
        let mut log = TrainingLog::default();
        log.losses.push((1, 0.5));
        log.val_bleu.push((8, 12.25));
        log.divergence.push(DivergenceRecord {
            step: 0,
            kl_unigram: 1.0,
            kl_unigram_se: 0.1,
            kl_uniform: 2.0,
            kl_uniform_se: 0.2,
            xent_empirical: 3.0,
            xent_empirical_se: 0.3,
        });
        log.bias_drift.push(BiasDriftRecord {
            step: 0,
            kl_to_unigram: 0.25,
            bias_norm: 4.0,
        });
        log.best = Some((8, 12.25));
        let mut buf = Vec::new();
        log.write_records(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("1,loss,value=0.5"));
        assert!(text.contains("8,eval,bleu=12.25"));
        assert!(text.contains("0,probe,kl_unigram=1"));
        assert!(text.contains("8,best,bleu=12.25"));
    }

    #[test]
    fn switch_step_must_precede_max_steps() {
        let mut cfg = tiny_train_cfg(1, 100);
        cfg.regularizer = Some(Regularizer {
            lambda: 1.0,
            switch_step: 100,
        });
        assert!(cfg.validate().is_err());
        cfg.regularizer = Some(Regularizer {
            lambda: 1.0,
            switch_step: 99,
        });
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn copy_task_reaches_the_convergence_floor() {
        let vocab = 50;
        let train_spec = SynthSpec {
            kind: TaskKind::Copy,
            vocab_size: vocab,
            zipf_s: 1.0,
            pairs: 800,
            len_range: (3, 5),
            seed: 71,
            split: Split::Train,
        };
        let valid_spec = SynthSpec {
            split: Split::Valid,
            pairs: 100,
            ..train_spec.clone()
        };
        let (train_c, vocab_table) = generate_synthetic_task(&train_spec).unwrap();
        let (valid_c, _) = generate_synthetic_task(&valid_spec).unwrap();
        let v_total = vocab_table.len();
        let unigram = estimate_unigram(&train_c.targets(), v_total, 1.0).unwrap();
        let inputs = TrainInputs {
            train: &train_c,
            valid: &valid_c,
            vocab: &vocab_table,
            unigram: &unigram,
        };

        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ffn: 64,
            dropout: 0.0,
            vocab_size: v_total,
            max_len: 16,
            lm_mode: false,
        };
        let mut model = TransformerModel::new(cfg, &BiasInit::zero(), 13).unwrap();
        let tcfg = TrainingConfig {
            base_lr: 2e-3,
            warmup_steps: 200,
            betas: (0.9, 0.997),
            eps: 1e-8,
            batch_tokens: 96,
            max_steps: 2000,
            eval_every: 1000,
            patience: 50,
            alpha: 0.0,
            regularizer: None,
            probe_every: 2000,
            seed: 45,
        };
        let out = train(&mut model, &inputs, &tcfg).unwrap();
        assert!(out.log.diverged.is_none());

        let last = out.log.losses.last().unwrap().1;
        assert!(last < 0.2, "final loss {last} nats/token");
        let tail: Vec<f64> = out.log.losses.iter().rev().take(25).map(|(_, l)| *l).collect();
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(tail_mean < 0.2, "mean of last 25 losses {tail_mean}");

        // The trained model copies: greedy decoding reproduces the source.
        let best = out.best.to_model();
        let mut exact = 0usize;
        for (src, tgt) in valid_c.pairs() {
            let hyp = greedy_decode(&best, src, decode_cap(&best, src.len()));
            if hyp.tokens == *tgt {
                exact += 1;
            }
        }
        let rate = exact as f64 / valid_c.len() as f64;
        assert!(rate >= 0.95, "copy reproduction rate {rate}");

        // Teacher-forced argmax agrees with the target nearly everywhere.
        let mut hits = 0usize;
        let mut total = 0usize;
        for (src, tgt) in valid_c.pairs().iter().take(50) {
            let rows = best.teacher_forced_log_probs(src, tgt, true);
            for (row, &y) in rows.iter().zip(tgt) {
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                hits += (argmax == y as usize) as usize;
                total += 1;
            }
        }
        let acc = hits as f64 / total as f64;
        assert!(acc >= 0.95, "next-token accuracy {acc}");
    }
}
