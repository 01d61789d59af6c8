//! Experiment runner: multi-seed sweeps over bias initialization
//! strategies on a shared dataset, metric aggregation with standard errors,
//! CSV emission, and out-of-domain evaluation.
//!
//! A sweep trains one model per (strategy, seed) cell. Every cell gets its
//! own rng streams derived from the root seed and the strategy name, so
//! adding a strategy leaves the other cells' runs untouched. Completed
//! cells are recorded in per-run manifests under the output directory;
//! re-running a finished sweep reloads those manifests instead of training
//! again, and a crashed sweep resumes from the cells that survived.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::corpus::{
    estimate_unigram, ParallelCorpus, Split, UnigramDistribution, Vocabulary, RESERVED,
};
use crate::decoding::{beam_search, greedy_decode};
use crate::error::{Error, Result};
use crate::metrics::{alc, bleu, chrf, frequency_binned_logprob, mean_and_stderr, LearningCurve};
use crate::model::{BiasInit, BiasMode, Checkpoint, ModelConfig, TransformerModel};
use crate::rng::derive_seed;
use crate::synth::{generate_synthetic_task, SynthSpec};
use crate::training::{
    decode_cap, strip_eos, train, Regularizer, TrainInputs, TrainingConfig, TrainingLog,
};

/// Metric names that appear in `results.csv`, in emission order.
pub const METRIC_NAMES: [&str; 4] = ["bleu", "chrf", "alc", "freq_slope_nobias"];

/// Curve series names that appear in `curves.csv`.
pub const SERIES_NAMES: [&str; 7] = [
    "loss",
    "val_bleu",
    "kl_unigram",
    "kl_uniform",
    "xent_empirical",
    "bias_kl",
    "bias_norm",
];

/// One training arm of a sweep: a bias initialization plus, optionally, the
/// anti-unigram regularizer for the objective-ablation arm.
#[derive(Debug, Clone)]
pub struct Strategy {
    /// Label used in run ids, CSV rows, and directory names.
    pub name: String,
    pub bias: BiasMode,
    pub regularizer: Option<Regularizer>,
}

impl Strategy {
    pub fn new(name: &str, bias: BiasMode) -> Self {
        Strategy {
            name: name.to_string(),
            bias,
            regularizer: None,
        }
    }

    pub fn with_regularizer(mut self, reg: Regularizer) -> Self {
        self.regularizer = Some(reg);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("strategy name must not be empty".into()));
        }
        if let Some(bad) = self
            .name
            .chars()
            .find(|c| !(c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '+' | '.')))
        {
            return Err(Error::Config(format!(
                "strategy name {:?} contains {bad:?}; use alphanumerics, '_', '-', '+', '.'",
                self.name
            )));
        }
        Ok(())
    }
}

/// A synthetic dataset: the train-split generator spec plus sizes for the
/// valid and test splits, which reuse the same task seed (and therefore the
/// same substitution map) on distinct streams.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub name: String,
    pub train: SynthSpec,
    pub valid_pairs: usize,
    pub test_pairs: usize,
}

/// The corpora and statistics shared by every run of a sweep.
pub struct SweepData {
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
    pub vocab: Vocabulary,
    pub unigram: UnigramDistribution,
}

/// Generates the three splits of a dataset and the train-side unigram.
pub fn prepare_data(ds: &DatasetSpec) -> Result<SweepData> {
    let mut train_spec = ds.train.clone();
    train_spec.split = Split::Train;
    let valid_spec = SynthSpec {
        split: Split::Valid,
        pairs: ds.valid_pairs,
        ..train_spec.clone()
    };
    let test_spec = SynthSpec {
        split: Split::Test,
        pairs: ds.test_pairs,
        ..train_spec.clone()
    };
    let (train, vocab) = generate_synthetic_task(&train_spec)?;
    let (valid, _) = generate_synthetic_task(&valid_spec)?;
    let (test, _) = generate_synthetic_task(&test_spec)?;
    let unigram = estimate_unigram(&train.targets(), vocab.len(), 1.0)?;
    Ok(SweepData {
        train,
        valid,
        test,
        vocab,
        unigram,
    })
}

/// Everything `run_sweep` needs: the dataset, the strategy arms, the seed
/// labels, and the shared model/training configuration.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub strategies: Vec<Strategy>,
    /// Seed labels; each (strategy, label) cell derives its own streams.
    pub seeds: Vec<u64>,
    pub root_seed: u64,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    /// ALC horizon as a fraction of `training.max_steps`.
    pub alc_fraction: f64,
    /// Beam width for the final test-set evaluation.
    pub beam: usize,
    /// Bin count for the frequency-binned log-probability report.
    pub num_bins: usize,
    /// Unigram distribution for the external-log-unigram strategy, if any.
    pub external_unigram: Option<UnigramDistribution>,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        if self.strategies.is_empty() {
            return Err(Error::Config("sweep needs at least one strategy".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        let mut names: Vec<&str> = self.strategies.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.strategies.len() {
            return Err(Error::Config("strategy names must be unique".into()));
        }
        for s in &self.strategies {
            s.validate()?;
            if s.bias == BiasMode::ExternalLogUnigram && self.external_unigram.is_none() {
                return Err(Error::Config(format!(
                    "strategy `{}` needs an external unigram distribution",
                    s.name
                )));
            }
        }
        if let Some(u) = &self.external_unigram {
            if u.len() != self.model.vocab_size {
                return Err(Error::Config(format!(
                    "external unigram has {} entries, model vocabulary has {}",
                    u.len(),
                    self.model.vocab_size
                )));
            }
        }
        let expected_vocab = self.dataset.train.vocab_size + RESERVED.len();
        if self.model.vocab_size != expected_vocab {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match the dataset ({} content + {} reserved)",
                self.model.vocab_size,
                self.dataset.train.vocab_size,
                RESERVED.len()
            )));
        }
        if self.dataset.train.len_range.1 + 1 >= self.model.max_len {
            return Err(Error::Config(format!(
                "sentences up to {} tokens do not fit max_len {}",
                self.dataset.train.len_range.1, self.model.max_len
            )));
        }
        if !(self.alc_fraction > 0.0 && self.alc_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "alc_fraction {} not in (0, 1]",
                self.alc_fraction
            )));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.num_bins == 0 {
            return Err(Error::Config("num_bins must be at least 1".into()));
        }
        Ok(())
    }

    /// Step horizon for ALC: the first `alc_fraction` of training.
    pub fn alc_horizon(&self) -> u64 {
        (self.alc_fraction * self.training.max_steps as f64).round() as u64
    }
}

/// Per-run metric values. `alc` is absent when fewer than two validation
/// points fall inside the horizon (for example in a zero-step run).
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub strategy: String,
    pub seed: u64,
    pub bleu: f64,
    pub chrf: f64,
    pub alc: Option<f64>,
    pub freq_slope_nobias: f64,
}

impl RunMetrics {
    fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "bleu" => Some(self.bleu),
            "chrf" => Some(self.chrf),
            "alc" => self.alc,
            "freq_slope_nobias" => Some(self.freq_slope_nobias),
            _ => None,
        }
    }
}

/// Sweep results: one row per completed cell plus the cells that failed.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<RunMetrics>,
    /// (strategy, seed, error) for cells that did not complete.
    pub missing: Vec<(String, u64, String)>,
}

impl MetricReport {
    /// Values of `metric` for `strategy`, in row (seed) order.
    pub fn values(&self, strategy: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.strategy == strategy)
            .filter_map(|r| r.get(metric))
            .collect()
    }

    /// Mean and standard error of `metric` over the strategy's seeds.
    pub fn aggregate(&self, strategy: &str, metric: &str) -> Option<(f64, f64)> {
        let xs = self.values(strategy, metric);
        if xs.is_empty() {
            None
        } else {
            Some(mean_and_stderr(&xs))
        }
    }

    pub fn run(&self, strategy: &str, seed: u64) -> Option<&RunMetrics> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.seed == seed)
    }
}

/// One `curves.csv` data point.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub run_id: String,
    pub step: u64,
    pub series: String,
    pub value: f64,
}

/// Flattens a training log into curve rows for one run.
pub fn log_to_rows(run_id: &str, log: &TrainingLog) -> Vec<CurveRow> {
    let mut rows = Vec::new();
    let mut push = |step: u64, series: &str, value: f64| {
        rows.push(CurveRow {
            run_id: run_id.to_string(),
            step,
            series: series.to_string(),
            value,
        });
    };
    for &(step, loss) in &log.losses {
        push(step, "loss", loss);
    }
    for &(step, score) in &log.val_bleu {
        push(step, "val_bleu", score);
    }
    for d in &log.divergence {
        push(d.step, "kl_unigram", d.kl_unigram);
        push(d.step, "kl_uniform", d.kl_uniform);
        push(d.step, "xent_empirical", d.xent_empirical);
    }
    for b in &log.bias_drift {
        push(b.step, "bias_kl", b.kl_to_unigram);
        push(b.step, "bias_norm", b.bias_norm);
    }
    rows
}

/// Serializes curve rows under the `run_id,step,series,value` header.
pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("run_id,step,series,value\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.run_id, r.step, r.series, r.value).expect("string write");
    }
    out
}

/// Parses a `curves.csv` produced by [`curves_csv`].
pub fn parse_curves(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("run_id,step,series,value") => {}
        other => {
            return Err(Error::Data(format!(
                "curves csv: bad header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.splitn(4, ',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!("curves csv line {}: {line:?}", i + 2)));
        }
        let step: u64 = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("curves csv line {}: bad step", i + 2)))?;
        let value: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Data(format!("curves csv line {}: bad value", i + 2)))?;
        rows.push(CurveRow {
            run_id: fields[0].to_string(),
            step,
            series: fields[2].to_string(),
            value,
        });
    }
    Ok(rows)
}

/// Serializes a report under the `dataset,strategy,seed,metric,value`
/// header: per-seed rows first, then `seed=mean` and `seed=stderr`
/// aggregate rows per strategy and metric.
pub fn results_csv(report: &MetricReport, dataset: &str, strategy_order: &[String]) -> String {
    let mut out = String::from("dataset,strategy,seed,metric,value\n");
    for strategy in strategy_order {
        for row in report.rows.iter().filter(|r| &r.strategy == strategy) {
            for metric in METRIC_NAMES {
                if let Some(v) = row.get(metric) {
                    writeln!(out, "{dataset},{strategy},{},{metric},{v}", row.seed)
                        .expect("string write");
                }
            }
        }
    }
    for strategy in strategy_order {
        for metric in METRIC_NAMES {
            if let Some((mean, se)) = report.aggregate(strategy, metric) {
                writeln!(out, "{dataset},{strategy},mean,{metric},{mean}").expect("string write");
                writeln!(out, "{dataset},{strategy},stderr,{metric},{se}").expect("string write");
            }
        }
    }
    out
}

/// BLEU and chrF of a decoded corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalScores {
    pub bleu: f64,
    pub chrf: f64,
}

/// Decodes every source with the given beam width and scores the output
/// against the references, as token-id BLEU and detokenized chrF.
pub fn evaluate_corpus(
    model: &TransformerModel,
    corpus: &ParallelCorpus,
    vocab: &Vocabulary,
    beam_size: usize,
) -> Result<EvalScores> {
    if corpus.is_empty() {
        return Err(Error::Data("evaluation corpus is empty".into()));
    }
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut refs = Vec::with_capacity(corpus.len());
    for (src, tgt) in corpus.pairs() {
        let cap = decode_cap(model, src.len());
        let hyp = if beam_size == 1 {
            greedy_decode(model, src, cap)
        } else {
            beam_search(model, src, beam_size, cap)
        };
        hyps.push(strip_eos(&hyp.tokens));
        refs.push(strip_eos(tgt));
    }
    let bleu_score = bleu(&hyps, &refs, 4)?;
    let hyp_text: Vec<String> = hyps.iter().map(|h| vocab.decode_words(h)).collect();
    let ref_text: Vec<String> = refs.iter().map(|r| vocab.decode_words(r)).collect();
    let chrf_score = chrf(&hyp_text, &ref_text, 6, 2.0)?;
    Ok(EvalScores {
        bleu: bleu_score,
        chrf: chrf_score,
    })
}

/// Decodes an out-of-domain corpus with a trained checkpoint. The text is
/// tokenized with the checkpoint's own vocabulary (unknown words fall back
/// to UNK) and scored with beam-5-style evaluation against the references.
pub fn evaluate_ood(
    ckpt: &Checkpoint,
    src_lines: &[String],
    ref_lines: &[String],
    beam_size: usize,
) -> Result<EvalScores> {
    let model = ckpt.to_model();
    let corpus = ParallelCorpus::build(
        src_lines,
        ref_lines,
        |l| ckpt.vocab.encode_words(l),
        model.config.vocab_size,
        Split::Test,
    )?;
    evaluate_corpus(&model, &corpus, &ckpt.vocab, beam_size)
}

/// Errors unless `vocab_path` holds exactly the vocabulary the checkpoint
/// was trained with.
pub fn check_vocab_compatibility(ckpt: &Checkpoint, vocab_path: &Path) -> Result<()> {
    let v = Vocabulary::load(vocab_path)?;
    if v.tokens() != ckpt.vocab.tokens() {
        return Err(Error::VocabMismatch {
            given: vocab_path.to_path_buf(),
            expected: None,
        });
    }
    Ok(())
}

/// (log unigram, model log-probability) per ground-truth target token,
/// teacher-forced over the corpus. With `include_bias` false the model's
/// output bias is dropped, leaving only the contextual expert.
pub fn collect_frequency_samples(
    model: &TransformerModel,
    corpus: &ParallelCorpus,
    unigram: &UnigramDistribution,
    include_bias: bool,
) -> Result<Vec<(f64, f64)>> {
    if corpus.is_empty() {
        return Err(Error::Data("frequency report corpus is empty".into()));
    }
    let log_u = unigram.log_probs()?;
    let mut samples = Vec::new();
    for (src, tgt) in corpus.pairs() {
        let rows = model.teacher_forced_log_probs(src, tgt, include_bias);
        for (row, &tok) in rows.iter().zip(tgt) {
            samples.push((log_u[tok as usize], row[tok as usize]));
        }
    }
    Ok(samples)
}

/// The output of one sweep invocation.
pub struct SweepOutput {
    pub report: MetricReport,
    pub curve_rows: Vec<CurveRow>,
    pub results_path: PathBuf,
    pub curves_path: PathBuf,
}

pub fn run_id(strategy: &str, seed: u64) -> String {
    format!("{strategy}-s{seed}")
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The shared (run-independent) portion of the manifest; its digest decides
/// whether an existing run directory still matches the sweep spec.
fn spec_manifest(spec: &ExperimentSpec) -> Config {
    let mut c = Config::new();
    let d = &spec.dataset;
    c.set("dataset", "name", &d.name);
    c.set("dataset", "task", d.train.kind.as_str());
    c.set("dataset", "vocab_size", d.train.vocab_size);
    c.set("dataset", "zipf_s", d.train.zipf_s);
    c.set("dataset", "train_pairs", d.train.pairs);
    c.set("dataset", "valid_pairs", d.valid_pairs);
    c.set("dataset", "test_pairs", d.test_pairs);
    c.set("dataset", "len_min", d.train.len_range.0);
    c.set("dataset", "len_max", d.train.len_range.1);
    c.set("dataset", "seed", d.train.seed);

    let m = &spec.model;
    c.set("model", "layers", m.layers);
    c.set("model", "heads", m.heads);
    c.set("model", "d_model", m.d_model);
    c.set("model", "d_ffn", m.d_ffn);
    c.set("model", "dropout", m.dropout);
    c.set("model", "vocab_size", m.vocab_size);
    c.set("model", "max_len", m.max_len);
    c.set("model", "lm_mode", m.lm_mode);

    let t = &spec.training;
    c.set("training", "base_lr", t.base_lr);
    c.set("training", "warmup_steps", t.warmup_steps);
    c.set("training", "beta1", t.betas.0);
    c.set("training", "beta2", t.betas.1);
    c.set("training", "eps", t.eps);
    c.set("training", "batch_tokens", t.batch_tokens);
    c.set("training", "max_steps", t.max_steps);
    c.set("training", "eval_every", t.eval_every);
    c.set("training", "patience", t.patience);
    c.set("training", "alpha", t.alpha);
    c.set("training", "probe_every", t.probe_every);

    c.set("sweep", "root_seed", spec.root_seed);
    c.set("sweep", "alc_fraction", spec.alc_fraction);
    c.set("sweep", "alc_horizon", spec.alc_horizon());
    c.set("sweep", "beam", spec.beam);
    c.set("sweep", "num_bins", spec.num_bins);
    c.set(
        "sweep",
        "seeds",
        spec.seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(" "),
    );
    c.set(
        "sweep",
        "strategies",
        spec.strategies
            .iter()
            .map(|s| s.name.clone())
            .collect::<Vec<_>>()
            .join(" "),
    );
    if let Some(u) = &spec.external_unigram {
        let bits = u
            .probs()
            .iter()
            .flat_map(|p| p.to_bits().to_le_bytes())
            .collect::<Vec<u8>>();
        c.set("sweep", "external_unigram_digest", format!("{:016x}", fnv1a64(&bits)));
    }
    c
}

fn strategy_manifest(c: &mut Config, s: &Strategy) {
    c.set("strategy", "name", &s.name);
    c.set("strategy", "bias", s.bias.as_str());
    match &s.regularizer {
        Some(r) => {
            c.set("strategy", "anti_unigram_lambda", r.lambda);
            c.set("strategy", "anti_unigram_switch_step", r.switch_step);
        }
        None => c.set("strategy", "objective", "standard"),
    }
}

fn spec_digest(spec: &ExperimentSpec) -> String {
    let mut c = spec_manifest(spec);
    for s in &spec.strategies {
        let mut sc = Config::new();
        strategy_manifest(&mut sc, s);
        c.set("sweep", &format!("strategy_digest_{}", s.name), format!("{:016x}", fnv1a64(sc.echo().as_bytes())));
    }
    format!("{:016x}", fnv1a64(c.echo().as_bytes()))
}

fn make_bias_init(
    mode: BiasMode,
    train_unigram: &UnigramDistribution,
    external: Option<&UnigramDistribution>,
) -> Result<BiasInit> {
    Ok(match mode {
        BiasMode::Zero => BiasInit::zero(),
        BiasMode::None => BiasInit::none(),
        BiasMode::LogUnigram => BiasInit::log_unigram(train_unigram.clone()),
        BiasMode::ExternalLogUnigram => BiasInit::external_log_unigram(
            external
                .ok_or_else(|| {
                    Error::Config("external-log-unigram needs a unigram distribution".into())
                })?
                .clone(),
        ),
    })
}

struct CellResult {
    metrics: RunMetrics,
    rows: Vec<CurveRow>,
    log: TrainingLog,
    best: Checkpoint,
    last: Checkpoint,
}

fn run_cell(
    spec: &ExperimentSpec,
    data: &SweepData,
    strategy: &Strategy,
    seed: u64,
) -> Result<CellResult> {
    let run_seed = derive_seed(spec.root_seed, &strategy.name, seed);
    let bias = make_bias_init(strategy.bias, &data.unigram, spec.external_unigram.as_ref())?;
    let mut model = TransformerModel::new(
        spec.model.clone(),
        &bias,
        derive_seed(run_seed, "model-init", 0),
    )?;
    let mut tcfg = spec.training.clone();
    tcfg.seed = derive_seed(run_seed, "training", 0);
    tcfg.regularizer = strategy.regularizer.clone();
    let inputs = TrainInputs {
        train: &data.train,
        valid: &data.valid,
        vocab: &data.vocab,
        unigram: &data.unigram,
    };
    let out = train(&mut model, &inputs, &tcfg)?;
    if let Some(param) = &out.log.diverged {
        return Err(Error::Diverged {
            step: out.last.step,
            param: param.clone(),
        });
    }

    let best_model = out.best.to_model();
    let scores = evaluate_corpus(&best_model, &data.test, &data.vocab, spec.beam)?;
    let samples = collect_frequency_samples(&best_model, &data.test, &data.unigram, false)?;
    let freq = frequency_binned_logprob(&samples, spec.num_bins, false)?;
    let horizon = spec.alc_horizon();
    let in_horizon = out
        .log
        .val_bleu
        .iter()
        .filter(|&&(s, _)| s <= horizon)
        .count();
    let alc_score = if in_horizon >= 2 {
        Some(alc(
            &LearningCurve::from_points(out.log.val_bleu.clone())?,
            horizon,
        )?)
    } else {
        None
    };

    let id = run_id(&strategy.name, seed);
    let rows = log_to_rows(&id, &out.log);
    Ok(CellResult {
        metrics: RunMetrics {
            strategy: strategy.name.clone(),
            seed,
            bleu: scores.bleu,
            chrf: scores.chrf,
            alc: alc_score,
            freq_slope_nobias: freq.slope(),
        },
        rows,
        log: out.log,
        best: out.best,
        last: out.last,
    })
}

fn cell_dir(out_dir: &Path, id: &str) -> PathBuf {
    out_dir.join("runs").join(id)
}

fn write_cell(dir: &Path, spec: &ExperimentSpec, strategy: &Strategy, seed: u64, digest: &str, cell: &CellResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let curves_path = dir.join("curves.csv");
    fs::write(&curves_path, curves_csv(&cell.rows)).map_err(|e| Error::io(&curves_path, e))?;
    cell.best.save(&dir.join("best.ckpt"))?;
    cell.last.save(&dir.join("last.ckpt"))?;

    let records_path = dir.join("records.txt");
    let mut records = Vec::new();
    cell.log
        .write_records(&mut records)
        .expect("vec write cannot fail");
    fs::write(&records_path, records).map_err(|e| Error::io(&records_path, e))?;

    let mut manifest = spec_manifest(spec);
    strategy_manifest(&mut manifest, strategy);
    manifest.set("run", "id", run_id(&strategy.name, seed));
    manifest.set("run", "seed_label", seed);
    manifest.set("run", "spec_digest", digest);
    manifest.set("run", "status", "complete");
    let m = &cell.metrics;
    manifest.set("metrics", "bleu", m.bleu);
    manifest.set("metrics", "chrf", m.chrf);
    if let Some(a) = m.alc {
        manifest.set("metrics", "alc", a);
    }
    manifest.set("metrics", "freq_slope_nobias", m.freq_slope_nobias);
    if let Some((step, score)) = cell.log.best {
        manifest.set("metrics", "best_step", step);
        manifest.set("metrics", "best_val_bleu", score);
    }
    manifest.set("metrics", "stopped_early", cell.log.stopped_early);
    // The manifest lands last: its presence marks the cell complete.
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest.echo()).map_err(|e| Error::io(&manifest_path, e))
}

/// Reloads a finished cell if its manifest matches the current spec.
fn load_cell(dir: &Path, digest: &str, strategy: &str, seed: u64) -> Option<(RunMetrics, Vec<CurveRow>)> {
    let manifest = Config::load(&dir.join("manifest.txt")).ok()?;
    if manifest.get("run", "status") != Some("complete")
        || manifest.get("run", "spec_digest") != Some(digest)
    {
        return None;
    }
    let metrics = RunMetrics {
        strategy: strategy.to_string(),
        seed,
        bleu: manifest.f64("metrics", "bleu").ok()??,
        chrf: manifest.f64("metrics", "chrf").ok()??,
        alc: manifest.f64("metrics", "alc").ok()?,
        freq_slope_nobias: manifest.f64("metrics", "freq_slope_nobias").ok()??,
    };
    let curves = fs::read_to_string(dir.join("curves.csv")).ok()?;
    Some((metrics, parse_curves(&curves).ok()?))
}

/// Trains every (strategy, seed) cell that has no up-to-date manifest,
/// reloads the rest, and writes `results.csv` and `curves.csv` to the
/// output directory. Cells that fail are recorded in the report and do not
/// stop the sweep.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepOutput> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;
    let data = prepare_data(&spec.dataset)?;
    let digest = spec_digest(spec);

    let mut report = MetricReport::default();
    let mut curve_rows = Vec::new();
    for strategy in &spec.strategies {
        for &seed in &spec.seeds {
            let id = run_id(&strategy.name, seed);
            let dir = cell_dir(&spec.out_dir, &id);
            if let Some((metrics, rows)) = load_cell(&dir, &digest, &strategy.name, seed) {
                report.rows.push(metrics);
                curve_rows.extend(rows);
                continue;
            }
            match run_cell(spec, &data, strategy, seed) {
                Ok(cell) => {
                    write_cell(&dir, spec, strategy, seed, &digest, &cell)?;
                    report.rows.push(cell.metrics);
                    curve_rows.extend(cell.rows);
                }
                Err(e) => report.missing.push((strategy.name.clone(), seed, e.to_string())),
            }
        }
    }

    let order: Vec<String> = spec.strategies.iter().map(|s| s.name.clone()).collect();
    let results_path = spec.out_dir.join("results.csv");
    fs::write(&results_path, results_csv(&report, &spec.dataset.name, &order))
        .map_err(|e| Error::io(&results_path, e))?;
    let curves_path = spec.out_dir.join("curves.csv");
    fs::write(&curves_path, curves_csv(&curve_rows)).map_err(|e| Error::io(&curves_path, e))?;

    Ok(SweepOutput {
        report,
        curve_rows,
        results_path,
        curves_path,
    })
}

/// Parses a `results.csv` produced by [`results_csv`], skipping the
/// aggregate rows (they are recomputed from the data rows). Returns the
/// dataset name, the report, and the strategy order of first appearance.
pub fn parse_results(text: &str) -> Result<(String, MetricReport, Vec<String>)> {
    let mut lines = text.lines();
    match lines.next() {
        Some("dataset,strategy,seed,metric,value") => {}
        other => return Err(Error::Data(format!("results csv: bad header {other:?}"))),
    }
    let mut dataset = String::new();
    let mut order: Vec<String> = Vec::new();
    let mut cells: Vec<(String, u64)> = Vec::new();
    let mut values: Vec<Vec<(String, f64)>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.splitn(5, ',').collect();
        if f.len() != 5 {
            return Err(Error::Data(format!("results csv line {}: {line:?}", i + 2)));
        }
        if dataset.is_empty() {
            dataset = f[0].to_string();
        }
        if f[2] == "mean" || f[2] == "stderr" {
            continue;
        }
        let seed: u64 = f[2]
            .parse()
            .map_err(|_| Error::Data(format!("results csv line {}: bad seed {:?}", i + 2, f[2])))?;
        let value: f64 = f[4]
            .parse()
            .map_err(|_| Error::Data(format!("results csv line {}: bad value", i + 2)))?;
        if !order.iter().any(|s| s == f[1]) {
            order.push(f[1].to_string());
        }
        let key = (f[1].to_string(), seed);
        let slot = match cells.iter().position(|c| *c == key) {
            Some(p) => p,
            None => {
                cells.push(key);
                values.push(Vec::new());
                cells.len() - 1
            }
        };
        values[slot].push((f[3].to_string(), value));
    }
    let mut report = MetricReport::default();
    for ((strategy, seed), metrics) in cells.into_iter().zip(values) {
        let find = |name: &str| metrics.iter().find(|(m, _)| m == name).map(|&(_, v)| v);
        report.rows.push(RunMetrics {
            strategy: strategy.clone(),
            seed,
            bleu: find("bleu").ok_or_else(|| {
                Error::Data(format!("results csv: run {strategy}/{seed} has no bleu row"))
            })?,
            chrf: find("chrf").ok_or_else(|| {
                Error::Data(format!("results csv: run {strategy}/{seed} has no chrf row"))
            })?,
            alc: find("alc"),
            freq_slope_nobias: find("freq_slope_nobias").unwrap_or(0.0),
        });
    }
    Ok((dataset, report, order))
}

/// Renders the sweep's plots into `out_dir`: a divergence line chart per
/// run, a bar chart per aggregate metric, and the backing CSVs. Returns
/// the written file paths.
pub fn emit_plots(
    report: &MetricReport,
    curve_rows: &[CurveRow],
    dataset: &str,
    strategy_order: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    use crate::plot::{bar_chart, line_chart, Bar, Series};

    if report.rows.is_empty() {
        return Err(Error::Data("emit_plots: empty report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let save = |path: PathBuf, content: String| -> Result<PathBuf> {
        fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };

    written.push(save(
        out_dir.join("results.csv"),
        results_csv(report, dataset, strategy_order),
    )?);
    written.push(save(out_dir.join("curves.csv"), curves_csv(curve_rows))?);

    let mut run_ids: Vec<&str> = curve_rows.iter().map(|r| r.run_id.as_str()).collect();
    run_ids.dedup();
    run_ids.sort_unstable();
    run_ids.dedup();
    for id in run_ids {
        let series: Vec<Series> = ["kl_unigram", "kl_uniform", "xent_empirical"]
            .iter()
            .filter_map(|name| {
                let points: Vec<(f64, f64)> = curve_rows
                    .iter()
                    .filter(|r| r.run_id == id && r.series == *name)
                    .map(|r| (r.step as f64, r.value))
                    .collect();
                (!points.is_empty()).then(|| Series {
                    label: name.to_string(),
                    points,
                })
            })
            .collect();
        if series.is_empty() {
            continue;
        }
        written.push(save(
            out_dir.join(format!("divergence-{id}.svg")),
            line_chart(&format!("Divergence probes: {id}"), "step", "nats", &series),
        )?);
    }

    for metric in METRIC_NAMES {
        let bars: Vec<Bar> = strategy_order
            .iter()
            .filter_map(|s| {
                report.aggregate(s, metric).map(|(mean, se)| Bar {
                    label: s.clone(),
                    value: mean,
                    err: se,
                })
            })
            .collect();
        if bars.is_empty() {
            continue;
        }
        let (title, y_label) = match metric {
            "bleu" => ("Test BLEU (mean over seeds)", "BLEU"),
            "chrf" => ("Test chrF (mean over seeds)", "chrF"),
            "alc" => ("ALC of validation BLEU (mean over seeds)", "BLEU"),
            _ => ("Frequency-bin slope, bias omitted", "slope"),
        };
        written.push(save(
            out_dir.join(format!("bar-{metric}.svg")),
            bar_chart(title, y_label, &bars),
        )?);
    }
    Ok(written)
}

/// Directional checks for `sweep --check`: with both a `zero` and a
/// `log_unigram` arm present, the log-unigram side must match or beat zero
/// init on mean ALC, win the ALC pairing on a majority of seeds, and stay
/// within half a BLEU point on the test set. Returns the violated claims.
pub fn check_report(report: &MetricReport) -> Vec<String> {
    let mut failures = Vec::new();
    let zero_alc = report.values("zero", "alc");
    let logu_alc = report.values("log_unigram", "alc");
    if zero_alc.is_empty() || logu_alc.is_empty() || zero_alc.len() != logu_alc.len() {
        return vec!["check needs complete `zero` and `log_unigram` arms".into()];
    }
    let (zero_mean, _) = mean_and_stderr(&zero_alc);
    let (logu_mean, _) = mean_and_stderr(&logu_alc);
    if logu_mean < zero_mean {
        failures.push(format!(
            "mean ALC: log_unigram {logu_mean} < zero {zero_mean}"
        ));
    }
    let wins = logu_alc
        .iter()
        .zip(&zero_alc)
        .filter(|(l, z)| l > z)
        .count();
    if 2 * wins < logu_alc.len() + 1 {
        failures.push(format!(
            "paired ALC wins: log_unigram {wins} of {}",
            logu_alc.len()
        ));
    }
    let (zero_bleu, _) = mean_and_stderr(&report.values("zero", "bleu"));
    let (logu_bleu, _) = mean_and_stderr(&report.values("log_unigram", "bleu"));
    if logu_bleu < zero_bleu - 0.5 {
        failures.push(format!(
            "mean test BLEU: log_unigram {logu_bleu} more than 0.5 below zero {zero_bleu}"
        ));
    }
    failures
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::TaskKind;
    use crate::training::{BiasDriftRecord, DivergenceRecord};
    use tempfile::tempdir;

    fn fake_report() -> MetricReport {
        let mut rows = Vec::new();
        for (si, strategy) in ["zero", "log_unigram"].iter().enumerate() {
            for seed in 0..2u64 {
                rows.push(RunMetrics {
                    strategy: strategy.to_string(),
                    seed,
                    bleu: 10.0 + si as f64 + seed as f64,
                    chrf: 20.0 + si as f64,
                    alc: Some(5.0 + si as f64 * 0.5 + seed as f64 * 0.25),
                    freq_slope_nobias: 0.5 - si as f64 * 0.1,
                });
            }
        }
        MetricReport {
            rows,
            missing: Vec::new(),
        }
    }

    #[test]
    fn summarize_matches_the_closed_form() {
        let (mean, se) = mean_and_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(mean, 2.0);
        assert!((se - 1.0 / 3.0f64.sqrt()).abs() < 1e-15, "stderr {se}");
    }

    #[test]
    fn results_csv_lists_data_rows_then_aggregates() {
        let report = fake_report();
        let order = vec!["zero".to_string(), "log_unigram".to_string()];
        let csv = results_csv(&report, "toy", &order);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "dataset,strategy,seed,metric,value");
        // 2 strategies x 2 seeds x 4 metrics data rows, then mean+stderr
        // per strategy and metric.
        assert_eq!(lines.len(), 1 + 16 + 16);
        assert_eq!(lines[1], "toy,zero,0,bleu,10");
        assert!(lines.iter().any(|l| l.starts_with("toy,zero,mean,bleu,")));
        assert!(lines.iter().any(|l| l.starts_with("toy,log_unigram,stderr,alc,")));
        let data_rows = lines.iter().filter(|l| l.contains(",bleu,")).count();
        assert_eq!(data_rows, 4 + 4); // 4 per-seed + 2 strategies x (mean, stderr)
    }

    #[test]
    fn aggregates_are_permutation_invariant_over_seeds() {
        let mut report = fake_report();
        let forward = report.aggregate("zero", "bleu").unwrap();
        report.rows.reverse();
        let backward = report.aggregate("zero", "bleu").unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn curves_csv_round_trips() {
        let rows = vec![
            CurveRow {
                run_id: "zero-s0".into(),
                step: 0,
                series: "kl_unigram".into(),
                value: 1.25,
            },
            CurveRow {
                run_id: "zero-s0".into(),
                step: 100,
                series: "val_bleu".into(),
                value: 33.5,
            },
        ];
        let text = curves_csv(&rows);
        assert!(text.starts_with("run_id,step,series,value\n"));
        assert_eq!(parse_curves(&text).unwrap(), rows);
        assert!(parse_curves("bogus\n").is_err());
    }

    #[test]
    fn log_rows_cover_every_series() {
        let log = TrainingLog {
            losses: vec![(1, 2.5)],
            val_bleu: vec![(4, 10.0)],
            divergence: vec![DivergenceRecord {
                step: 2,
                kl_unigram: 0.5,
                kl_unigram_se: 0.01,
                kl_uniform: 0.7,
                kl_uniform_se: 0.01,
                xent_empirical: 3.0,
                xent_empirical_se: 0.1,
            }],
            bias_drift: vec![BiasDriftRecord {
                step: 2,
                kl_to_unigram: 0.0,
                bias_norm: 4.0,
            }],
            best: Some((4, 10.0)),
            stopped_early: false,
            diverged: None,
        };
        let rows = log_to_rows("zero-s0", &log);
        let series: Vec<&str> = rows.iter().map(|r| r.series.as_str()).collect();
        assert_eq!(
            series,
            ["loss", "val_bleu", "kl_unigram", "kl_uniform", "xent_empirical", "bias_kl", "bias_norm"]
        );
        for s in &series {
            assert!(SERIES_NAMES.contains(s), "unknown series {s}");
        }
    }

    #[test]
    fn check_report_flags_the_documented_directions() {
        let report = fake_report(); // log_unigram wins everywhere
        assert!(check_report(&report).is_empty());

        let mut bad = fake_report();
        for row in &mut bad.rows {
            if row.strategy == "log_unigram" {
                row.alc = Some(row.alc.unwrap() - 10.0);
                row.bleu -= 10.0;
            }
        }
        let failures = check_report(&bad);
        assert_eq!(failures.len(), 3, "{failures:?}");
    }

    fn tiny_spec(out_dir: PathBuf) -> ExperimentSpec {
        ExperimentSpec {
            dataset: DatasetSpec {
                name: "toy-copy".into(),
                train: SynthSpec {
                    kind: TaskKind::Copy,
                    vocab_size: 10,
                    zipf_s: 1.0,
                    pairs: 120,
                    len_range: (3, 4),
                    seed: 5,
                    split: Split::Train,
                },
                valid_pairs: 100,
                test_pairs: 100,
            },
            strategies: vec![
                Strategy::new("zero", BiasMode::Zero),
                Strategy::new("log_unigram", BiasMode::LogUnigram),
            ],
            seeds: vec![0],
            root_seed: 7,
            model: ModelConfig {
                layers: 1,
                heads: 2,
                d_model: 16,
                d_ffn: 32,
                dropout: 0.0,
                vocab_size: 14,
                max_len: 16,
                lm_mode: false,
            },
            training: TrainingConfig {
                base_lr: 1e-3,
                warmup_steps: 4,
                betas: (0.9, 0.997),
                eps: 1e-8,
                batch_tokens: 48,
                max_steps: 10,
                eval_every: 3,
                patience: 50,
                alpha: 0.1,
                regularizer: None,
                probe_every: 5,
                seed: 0,
            },
            alc_fraction: 0.8,
            beam: 2,
            num_bins: 4,
            external_unigram: None,
            out_dir,
        }
    }

    #[test]
    fn sweep_runs_are_recorded_and_reloaded_verbatim() {
        let dir = tempdir().unwrap();
        let spec = tiny_spec(dir.path().join("sweep"));
        let first = run_sweep(&spec).unwrap();
        assert_eq!(first.report.rows.len(), 2);
        assert!(first.report.missing.is_empty());
        let results_1 = fs::read(&first.results_path).unwrap();
        let curves_1 = fs::read(&first.curves_path).unwrap();

        // Mark the run dirs; an idempotent re-run must not rebuild them.
        let sentinel = cell_dir(&spec.out_dir, "zero-s0").join("sentinel");
        fs::write(&sentinel, b"keep").unwrap();
        let ckpt_path = cell_dir(&spec.out_dir, "zero-s0").join("best.ckpt");
        fs::remove_file(&ckpt_path).unwrap();

        let second = run_sweep(&spec).unwrap();
        assert!(sentinel.exists());
        assert!(!ckpt_path.exists(), "completed cell was re-trained");
        assert_eq!(fs::read(&second.results_path).unwrap(), results_1);
        assert_eq!(fs::read(&second.curves_path).unwrap(), curves_1);
        assert_eq!(first.report.rows, second.report.rows);
    }

    #[test]
    fn identical_root_seeds_give_identical_csv_bytes() {
        let dir = tempdir().unwrap();
        let a = run_sweep(&tiny_spec(dir.path().join("a"))).unwrap();
        let b = run_sweep(&tiny_spec(dir.path().join("b"))).unwrap();
        assert_eq!(
            fs::read(&a.results_path).unwrap(),
            fs::read(&b.results_path).unwrap()
        );
        assert_eq!(
            fs::read(&a.curves_path).unwrap(),
            fs::read(&b.curves_path).unwrap()
        );
    }

    #[test]
    fn changing_the_spec_invalidates_stored_cells() {
        let dir = tempdir().unwrap();
        let mut spec = tiny_spec(dir.path().join("sweep"));
        run_sweep(&spec).unwrap();
        let ckpt_path = cell_dir(&spec.out_dir, "zero-s0").join("best.ckpt");
        fs::remove_file(&ckpt_path).unwrap();

        spec.training.max_steps = 12;
        run_sweep(&spec).unwrap();
        assert!(ckpt_path.exists(), "stale cell was not re-trained");
    }

    #[test]
    fn zero_step_sweep_reports_init_metrics() {
        let dir = tempdir().unwrap();
        let mut spec = tiny_spec(dir.path().join("sweep"));
        spec.strategies = vec![Strategy::new("zero", BiasMode::Zero)];
        spec.training.max_steps = 0;
        let out = run_sweep(&spec).unwrap();
        assert_eq!(out.report.rows.len(), 1);
        let row = &out.report.rows[0];
        assert!(row.alc.is_none(), "no validation points, no ALC");
        assert!(row.bleu >= 0.0 && row.chrf >= 0.0);
        // The step-0 probe is the only curve content besides nothing else.
        assert!(out.curve_rows.iter().all(|r| r.step == 0));
        assert!(out.curve_rows.iter().any(|r| r.series == "kl_unigram"));
    }

    #[test]
    fn ood_evaluation_matches_in_domain_on_the_same_corpus() {
        let dir = tempdir().unwrap();
        let mut spec = tiny_spec(dir.path().join("sweep"));
        spec.strategies = vec![Strategy::new("zero", BiasMode::Zero)];
        run_sweep(&spec).unwrap();
        let ckpt =
            Checkpoint::load(&cell_dir(&spec.out_dir, "zero-s0").join("best.ckpt")).unwrap();

        let data = prepare_data(&spec.dataset).unwrap();
        let in_domain =
            evaluate_corpus(&ckpt.to_model(), &data.test, &data.vocab, spec.beam).unwrap();

        let src_lines: Vec<String> = data
            .test
            .pairs()
            .iter()
            .map(|(s, _)| data.vocab.decode_words(s))
            .collect();
        let ref_lines: Vec<String> = data
            .test
            .pairs()
            .iter()
            .map(|(_, t)| data.vocab.decode_words(&strip_eos(t)))
            .collect();
        let ood = evaluate_ood(&ckpt, &src_lines, &ref_lines, spec.beam).unwrap();
        assert_eq!(in_domain, ood);

        let err = evaluate_ood(&ckpt, &[], &[], spec.beam).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn vocab_compatibility_names_the_offending_file() {
        let dir = tempdir().unwrap();
        let mut spec = tiny_spec(dir.path().join("sweep"));
        spec.strategies = vec![Strategy::new("zero", BiasMode::Zero)];
        spec.training.max_steps = 0;
        run_sweep(&spec).unwrap();
        let ckpt =
            Checkpoint::load(&cell_dir(&spec.out_dir, "zero-s0").join("best.ckpt")).unwrap();

        let good = dir.path().join("same.vocab");
        ckpt.vocab.save(&good).unwrap();
        check_vocab_compatibility(&ckpt, &good).unwrap();

        let other = crate::synth::synthetic_vocabulary(12);
        let bad = dir.path().join("other.vocab");
        other.save(&bad).unwrap();
        let err = check_vocab_compatibility(&ckpt, &bad).unwrap_err();
        assert!(err.to_string().contains("other.vocab"), "{err}");
    }

    #[test]
    fn frequency_samples_count_every_target_token() {
        let data = prepare_data(&DatasetSpec {
            name: "toy".into(),
            train: SynthSpec {
                kind: TaskKind::Copy,
                vocab_size: 10,
                zipf_s: 1.0,
                pairs: 100,
                len_range: (3, 4),
                seed: 9,
                split: Split::Train,
            },
            valid_pairs: 100,
            test_pairs: 100,
        })
        .unwrap();
        let model = TransformerModel::new(
            ModelConfig {
                layers: 1,
                heads: 2,
                d_model: 16,
                d_ffn: 32,
                dropout: 0.0,
                vocab_size: 14,
                max_len: 16,
                lm_mode: false,
            },
            &BiasInit::log_unigram(data.unigram.clone()),
            3,
        )
        .unwrap();
        let samples =
            collect_frequency_samples(&model, &data.test, &data.unigram, true).unwrap();
        let expected: usize = data.test.pairs().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(samples.len(), expected);
        let report = frequency_binned_logprob(&samples, 5, true).unwrap();
        assert_eq!(report.total, expected);
        assert_eq!(report.bins.iter().map(|b| b.count).sum::<usize>(), expected);
    }

    #[test]
    fn spec_digest_tracks_semantic_changes_only() {
        let dir = tempdir().unwrap();
        let spec = tiny_spec(dir.path().join("x"));
        let base = spec_digest(&spec);
        assert_eq!(base, spec_digest(&spec));

        let mut moved = spec.clone();
        moved.out_dir = dir.path().join("elsewhere");
        assert_eq!(base, spec_digest(&moved), "output location is not semantic");

        let mut retrained = spec.clone();
        retrained.training.base_lr *= 2.0;
        assert_ne!(base, spec_digest(&retrained));

        let mut rebiased = spec.clone();
        rebiased.strategies[0].regularizer = Some(Regularizer {
            lambda: 0.5,
            switch_step: 2,
        });
        assert_ne!(base, spec_digest(&rebiased));
    }

    #[test]
    fn results_csv_parses_back_without_the_aggregates() {
        let report = fake_report();
        let order = vec!["zero".to_string(), "log_unigram".to_string()];
        let csv = results_csv(&report, "toy", &order);
        let (dataset, parsed, parsed_order) = parse_results(&csv).unwrap();
        assert_eq!(dataset, "toy");
        assert_eq!(parsed_order, order);
        assert_eq!(parsed.rows, report.rows);
    }

    #[test]
    fn plots_are_emitted_alongside_their_csvs() {
        let dir = tempdir().unwrap();
        let report = fake_report();
        let order = vec!["zero".to_string(), "log_unigram".to_string()];
        let rows = vec![
            CurveRow {
                run_id: "zero-s0".into(),
                step: 0,
                series: "kl_unigram".into(),
                value: 1.0,
            },
            CurveRow {
                run_id: "zero-s0".into(),
                step: 50,
                series: "kl_unigram".into(),
                value: 0.25,
            },
            CurveRow {
                run_id: "zero-s0".into(),
                step: 0,
                series: "kl_uniform".into(),
                value: 0.9,
            },
            CurveRow {
                run_id: "zero-s0".into(),
                step: 50,
                series: "kl_uniform".into(),
                value: 1.4,
            },
        ];
        let written = emit_plots(&report, &rows, "toy", &order, dir.path()).unwrap();
        let names: Vec<String> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert!(names.contains(&"results.csv".to_string()));
        assert!(names.contains(&"curves.csv".to_string()));
        assert!(names.contains(&"divergence-zero-s0.svg".to_string()));
        assert!(names.contains(&"bar-bleu.svg".to_string()));
        assert!(names.contains(&"bar-alc.svg".to_string()));
        for p in &written {
            assert!(p.exists());
        }
        let svg = fs::read_to_string(dir.path().join("divergence-zero-s0.svg")).unwrap();
        assert_eq!(svg.matches("class=\"series\"").count(), 2);
    }

    #[test]
    fn invalid_specs_are_rejected_up_front() {
        let dir = tempdir().unwrap();
        let good = tiny_spec(dir.path().join("x"));

        let mut no_seeds = good.clone();
        no_seeds.seeds.clear();
        assert!(run_sweep(&no_seeds).is_err());

        let mut wrong_vocab = good.clone();
        wrong_vocab.model.vocab_size = 32;
        assert!(wrong_vocab.validate().is_err());

        let mut dup = good.clone();
        dup.strategies = vec![
            Strategy::new("zero", BiasMode::Zero),
            Strategy::new("zero", BiasMode::LogUnigram),
        ];
        assert!(dup.validate().is_err());

        let mut external = good.clone();
        external.strategies = vec![Strategy::new("ext", BiasMode::ExternalLogUnigram)];
        assert!(external.validate().is_err());

        let mut long_sentences = good;
        long_sentences.dataset.train.len_range = (3, 20);
        assert!(long_sentences.validate().is_err());
    }
}
