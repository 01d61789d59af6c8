//! Command-line front end: data generation, vocabulary and BPE building,
//! training, evaluation, sweeps, and plotting.
//!
//! Exit codes: 0 on success, 1 for configuration errors (bad flags, bad
//! config files), 2 for runtime failures, 3 when `sweep --check` finds a
//! violated acceptance claim.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ubias::autodiff::{gradcheck, TensorId};
use ubias::bpe::train_bpe;
use ubias::config::Config;
use ubias::corpus::{
    estimate_unigram, load_lines, save_lines, ParallelCorpus, Split, UnigramDistribution,
    Vocabulary, EOS, RESERVED,
};
use ubias::error::{Error, Result};
use ubias::harness::{
    check_report, curves_csv, emit_plots, evaluate_corpus, evaluate_ood, parse_curves,
    parse_results, prepare_data, run_id, run_sweep, DatasetSpec, ExperimentSpec, Strategy,
    SweepData,
};
use ubias::metrics::{alc, LearningCurve};
use ubias::model::{
    BiasInit, BiasMode, Checkpoint, ModelConfig, TransformerModel,
};
use ubias::synth::{SynthSpec, TaskKind};
use ubias::training::{
    resume, train, Regularizer, TrainInputs, TrainOutput, TrainingConfig,
};

#[derive(Parser)]
#[command(
    name = "ubias",
    about = "Desk-scale transformer translation experiments around output-bias initialization",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parallel corpus split.
    GenData(GenDataArgs),
    /// Build a word-level vocabulary from text files.
    BuildVocab(BuildVocabArgs),
    /// Learn a byte-pair encoding from text.
    TrainBpe(TrainBpeArgs),
    /// Train one model from a config file.
    Train(TrainArgs),
    /// Score a checkpoint on a test set.
    Evaluate(EvaluateArgs),
    /// Score a checkpoint on an out-of-domain test set.
    EvaluateOod(EvaluateArgs),
    /// Run a multi-seed sweep over bias-init strategies.
    Sweep(SweepArgs),
    /// Compute the area under a learning curve from a curves CSV.
    Alc(AlcArgs),
    /// Render SVG plots from sweep CSVs.
    Plot(PlotArgs),
    /// Finite-difference check of the full training loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task kind: copy, reverse, or substitute.
    #[arg(long)]
    task: String,
    /// Content vocabulary size (reserved tokens come on top).
    #[arg(long)]
    vocab: usize,
    #[arg(long)]
    pairs: usize,
    /// Zipf skew of the token distribution.
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    #[arg(long, default_value_t = 4)]
    len_min: usize,
    #[arg(long, default_value_t = 12)]
    len_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split: train, valid, or test.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Input text files, whitespace tokenized.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainBpeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Target symbol count (alphabet plus merges).
    #[arg(long)]
    vocab_size: usize,
    /// Where to store the merge list.
    #[arg(long)]
    out: PathBuf,
    /// Also write the subword vocabulary (with counts) here.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Bias initialization: zero, none, log_unigram, external_log_unigram.
    #[arg(long)]
    bias: Option<String>,
    /// Probability file (one value per vocabulary id) for
    /// external_log_unigram.
    #[arg(long)]
    external_unigram: Option<PathBuf>,
    /// Resume from this checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src: PathBuf,
    /// Reference translations, one per source line.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Vocabulary file the corpus was tokenized with; must match the
    /// checkpoint's.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Verify the directional claims (ALC and BLEU of log_unigram vs
    /// zero); exit 3 if any fail.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct AlcArgs {
    /// curves.csv produced by a sweep or training run.
    #[arg(long)]
    curves: PathBuf,
    #[arg(long)]
    run_id: String,
    #[arg(long, default_value = "val_bleu")]
    series: String,
    #[arg(long)]
    t_max: u64,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    curves: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Sampled coordinates per parameter tensor.
    #[arg(long, default_value_t = 2)]
    coords: usize,
    #[arg(long, default_value_t = 77)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData(args) => gen_data(args),
        Cmd::BuildVocab(args) => build_vocab(args),
        Cmd::TrainBpe(args) => train_bpe_cmd(args),
        Cmd::Train(args) => train_cmd(args),
        Cmd::Evaluate(args) => evaluate_cmd(args, false),
        Cmd::EvaluateOod(args) => evaluate_cmd(args, true),
        Cmd::Sweep(args) => sweep_cmd(args),
        Cmd::Alc(args) => alc_cmd(args),
        Cmd::Plot(args) => plot_cmd(args),
        Cmd::Gradcheck(args) => gradcheck_cmd(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        kind: args.task.parse()?,
        vocab_size: args.vocab,
        zipf_s: args.zipf,
        pairs: args.pairs,
        len_range: (args.len_min, args.len_max),
        seed: args.seed,
        split: parse_split(&args.split)?,
    };
    let (corpus, vocab) = ubias::synth::generate_synthetic_task(&spec)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let prefix = spec.split.as_str();
    let src_lines: Vec<String> = corpus
        .pairs()
        .iter()
        .map(|(s, _)| vocab.decode_words(s))
        .collect();
    let tgt_lines: Vec<String> = corpus
        .pairs()
        .iter()
        .map(|(_, t)| vocab.decode_words(&ubias::training::strip_eos(t)))
        .collect();
    let src_path = args.out.join(format!("{prefix}.src"));
    let tgt_path = args.out.join(format!("{prefix}.tgt"));
    save_lines(&src_path, &src_lines)?;
    save_lines(&tgt_path, &tgt_lines)?;
    println!(
        "wrote {} pairs to {} / {}",
        corpus.len(),
        src_path.display(),
        tgt_path.display()
    );
    // Only the train split defines the reference vocabulary; other splits
    // reuse it.
    if spec.split == Split::Train {
        let vocab_path = args.out.join("vocab.tsv");
        vocab.save(&vocab_path)?;
        println!("vocabulary: {} entries in {}", vocab.len(), vocab_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!(
            "unknown split {other:?} (expected train, valid, or test)"
        ))),
    }
}

fn build_vocab(args: BuildVocabArgs) -> Result<ExitCode> {
    let mut vocab = Vocabulary::with_reserved();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for path in &args.input {
        for line in load_lines(path)? {
            for word in line.split_whitespace() {
                *counts.entry(word.to_string()).or_insert(0) += 1;
            }
        }
    }
    // Sorted insertion keeps ids independent of file order quirks.
    for (word, count) in &counts {
        let id = vocab.push_token(word)?;
        vocab.set_count(id, *count);
    }
    vocab.save(&args.out)?;
    println!(
        "wrote {} entries ({} reserved + {} words) to {}",
        vocab.len(),
        RESERVED.len(),
        counts.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_bpe_cmd(args: TrainBpeArgs) -> Result<ExitCode> {
    let lines = load_lines(&args.input)?;
    let model = train_bpe(&lines, args.vocab_size)?;
    model.save(&args.out)?;
    println!(
        "learned {} merges over a {}-symbol alphabet; wrote {}",
        model.merges().len(),
        model.alphabet().count(),
        args.out.display()
    );
    if let Some(vocab_out) = &args.vocab_out {
        let mut vocab = Vocabulary::with_reserved();
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for line in &lines {
            for word in line.split_whitespace() {
                for sym in model.segment_word(word) {
                    *counts.entry(sym).or_insert(0) += 1;
                }
            }
        }
        for (sym, count) in &counts {
            let id = vocab.push_token(sym)?;
            vocab.set_count(id, *count);
        }
        vocab.save(vocab_out)?;
        println!("wrote {} subword entries to {}", vocab.len(), vocab_out.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Dataset keys shared by `train` and `sweep` configs.
const DATASET_KEYS: [&str; 10] = [
    "name",
    "task",
    "vocab_size",
    "zipf_s",
    "pairs",
    "valid_pairs",
    "test_pairs",
    "len_min",
    "len_max",
    "seed",
];
const MODEL_KEYS: [&str; 7] = [
    "layers", "heads", "d_model", "d_ffn", "dropout", "max_len", "lm_mode",
];
const TRAINING_KEYS: [&str; 13] = [
    "base_lr",
    "warmup_steps",
    "beta1",
    "beta2",
    "eps",
    "batch_tokens",
    "max_steps",
    "eval_every",
    "patience",
    "alpha",
    "probe_every",
    "seed",
    "bias",
];
const SWEEP_KEYS: [&str; 8] = [
    "strategies",
    "seeds",
    "root_seed",
    "alc_fraction",
    "beam",
    "num_bins",
    "anti_unigram_lambda",
    "anti_unigram_switch_fraction",
];

fn dataset_from_config(cfg: &Config) -> Result<DatasetSpec> {
    cfg.expect_keys("dataset", &DATASET_KEYS)?;
    let task: TaskKind = cfg.require("dataset", "task")?.parse()?;
    let vocab_size = cfg
        .usize("dataset", "vocab_size")?
        .ok_or_else(|| Error::Config("missing required key `dataset.vocab_size`".into()))?;
    let pairs = cfg.usize_or("dataset", "pairs", 10_000)?;
    let spec = SynthSpec {
        kind: task,
        vocab_size,
        zipf_s: cfg.f64_or("dataset", "zipf_s", 1.0)?,
        pairs,
        len_range: (
            cfg.usize_or("dataset", "len_min", 4)?,
            cfg.usize_or("dataset", "len_max", 12)?,
        ),
        seed: cfg.u64_or("dataset", "seed", 0)?,
        split: Split::Train,
    };
    let name = cfg
        .get("dataset", "name")
        .map(str::to_string)
        .unwrap_or_else(|| format!("{}-v{}", task.as_str(), vocab_size));
    Ok(DatasetSpec {
        name,
        train: spec,
        valid_pairs: cfg.usize_or("dataset", "valid_pairs", 500)?,
        test_pairs: cfg.usize_or("dataset", "test_pairs", 500)?,
    })
}

fn model_from_config(cfg: &Config, vocab_size: usize) -> Result<ModelConfig> {
    cfg.expect_keys("model", &MODEL_KEYS)?;
    let mut m = ModelConfig::desk(vocab_size);
    m.layers = cfg.usize_or("model", "layers", m.layers)?;
    m.heads = cfg.usize_or("model", "heads", m.heads)?;
    m.d_model = cfg.usize_or("model", "d_model", m.d_model)?;
    m.d_ffn = cfg.usize_or("model", "d_ffn", m.d_ffn)?;
    m.dropout = cfg.f64_or("model", "dropout", m.dropout)?;
    m.max_len = cfg.usize_or("model", "max_len", m.max_len)?;
    m.lm_mode = cfg.bool_or("model", "lm_mode", false)?;
    m.validate()?;
    Ok(m)
}

fn training_from_config(cfg: &Config) -> Result<TrainingConfig> {
    cfg.expect_keys("training", &TRAINING_KEYS)?;
    let mut t = TrainingConfig::desk();
    t.base_lr = cfg.f64_or("training", "base_lr", t.base_lr)?;
    t.warmup_steps = cfg.u64_or("training", "warmup_steps", t.warmup_steps)?;
    t.betas = (
        cfg.f64_or("training", "beta1", t.betas.0)?,
        cfg.f64_or("training", "beta2", t.betas.1)?,
    );
    t.eps = cfg.f64_or("training", "eps", t.eps)?;
    t.batch_tokens = cfg.usize_or("training", "batch_tokens", t.batch_tokens)?;
    t.max_steps = cfg.u64_or("training", "max_steps", t.max_steps)?;
    t.eval_every = cfg.u64_or("training", "eval_every", t.eval_every)?;
    t.patience = cfg.u64_or("training", "patience", t.patience)?;
    t.alpha = cfg.f64_or("training", "alpha", t.alpha)?;
    t.probe_every = cfg.u64_or("training", "probe_every", t.probe_every)?;
    t.seed = cfg.u64_or("training", "seed", t.seed)?;
    t.validate()?;
    Ok(t)
}

/// Strategy tokens are a bias mode, optionally suffixed with `+anti` for
/// the anti-unigram regularizer arm, e.g. `zero`, `log_unigram`,
/// `zero+anti`.
fn strategies_from_config(cfg: &Config, max_steps: u64) -> Result<Vec<Strategy>> {
    let raw = cfg.str_or("sweep", "strategies", "zero log_unigram");
    let lambda = cfg.f64_or("sweep", "anti_unigram_lambda", 0.5)?;
    let fraction = cfg.f64_or("sweep", "anti_unigram_switch_fraction", 0.2)?;
    let switch_step = (fraction * max_steps as f64).round() as u64;
    let mut strategies = Vec::new();
    for token in raw.split_whitespace() {
        let (bias_part, anti) = match token.strip_suffix("+anti") {
            Some(prefix) => (prefix, true),
            None => (token, false),
        };
        let bias = BiasMode::parse(bias_part)?;
        let mut s = Strategy::new(token, bias);
        if anti {
            s = s.with_regularizer(Regularizer {
                lambda,
                switch_step,
            });
        }
        strategies.push(s);
    }
    Ok(strategies)
}

fn seeds_from_config(cfg: &Config) -> Result<Vec<u64>> {
    let raw = cfg.str_or("sweep", "seeds", "0 1 2 3 4");
    raw.split_whitespace()
        .map(|t| {
            t.parse::<u64>()
                .map_err(|_| Error::Config(format!("`sweep.seeds`: bad seed {t:?}")))
        })
        .collect()
}

fn load_unigram_probs(path: &Path, vocab_size: usize) -> Result<UnigramDistribution> {
    let lines = load_lines(path)?;
    let probs: Vec<f64> = lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("{}: bad probability {l:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    if probs.len() != vocab_size {
        return Err(Error::Data(format!(
            "{}: {} probabilities for a {}-token vocabulary",
            path.display(),
            probs.len(),
            vocab_size
        )));
    }
    UnigramDistribution::from_probs(probs)
}

fn experiment_from_config(cfg: &Config, out_dir: &Path) -> Result<ExperimentSpec> {
    cfg.expect_sections(&["dataset", "model", "training", "sweep"])?;
    cfg.expect_keys("sweep", &SWEEP_KEYS)?;
    let dataset = dataset_from_config(cfg)?;
    let model = model_from_config(cfg, dataset.train.vocab_size + RESERVED.len())?;
    let training = training_from_config(cfg)?;
    let strategies = strategies_from_config(cfg, training.max_steps)?;
    let spec = ExperimentSpec {
        dataset,
        strategies,
        seeds: seeds_from_config(cfg)?,
        root_seed: cfg.u64_or("sweep", "root_seed", 0)?,
        model,
        training,
        alc_fraction: cfg.f64_or("sweep", "alc_fraction", 0.4)?,
        beam: cfg.usize_or("sweep", "beam", 5)?,
        num_bins: cfg.usize_or("sweep", "num_bins", 10)?,
        external_unigram: None,
        out_dir: out_dir.to_path_buf(),
    };
    spec.validate()?;
    Ok(spec)
}

fn sweep_cmd(args: SweepArgs) -> Result<ExitCode> {
    let cfg = Config::load(&args.config)?;
    let spec = experiment_from_config(&cfg, &args.out)?;
    let out = run_sweep(&spec)?;
    let order: Vec<String> = spec.strategies.iter().map(|s| s.name.clone()).collect();
    for strategy in &order {
        for metric in ubias::harness::METRIC_NAMES {
            if let Some((mean, se)) = out.report.aggregate(strategy, metric) {
                println!("{strategy} {metric}: {mean:.4} +- {se:.4}");
            }
        }
    }
    for (strategy, seed, error) in &out.report.missing {
        eprintln!("missing cell {}: {error}", run_id(strategy, *seed));
    }
    emit_plots(
        &out.report,
        &out.curve_rows,
        &spec.dataset.name,
        &order,
        &spec.out_dir.join("plots"),
    )?;
    println!(
        "results: {}\ncurves: {}",
        out.results_path.display(),
        out.curves_path.display()
    );
    if args.check {
        let failures = check_report(&out.report);
        if !failures.is_empty() {
            for f in &failures {
                eprintln!("check failed: {f}");
            }
            return Ok(ExitCode::from(3));
        }
        println!("all sweep checks passed");
    }
    Ok(ExitCode::SUCCESS)
}

/// Builds corpora for `train`: either the synthetic task from `[dataset]`
/// or, with `task = files`, aligned text files tokenized by an explicit
/// vocabulary.
fn data_from_config(cfg: &Config) -> Result<(SweepData, String)> {
    if cfg.str_or("dataset", "task", "") == "files" {
        const FILE_KEYS: [&str; 9] = [
            "task",
            "name",
            "train_src",
            "train_tgt",
            "valid_src",
            "valid_tgt",
            "test_src",
            "test_tgt",
            "vocab",
        ];
        cfg.expect_keys("dataset", &FILE_KEYS)?;
        let vocab = Vocabulary::load(Path::new(cfg.require("dataset", "vocab")?))?;
        let load_split = |src_key: &str, tgt_key: &str, split: Split| -> Result<ParallelCorpus> {
            match (cfg.get("dataset", src_key), cfg.get("dataset", tgt_key)) {
                (Some(src), Some(tgt)) => ParallelCorpus::build(
                    &load_lines(Path::new(src))?,
                    &load_lines(Path::new(tgt))?,
                    |l| vocab.encode_words(l),
                    vocab.len(),
                    split,
                ),
                (None, None) => ParallelCorpus::from_id_pairs(Vec::new(), vocab.len(), split),
                _ => Err(Error::Config(format!(
                    "`dataset.{src_key}` and `dataset.{tgt_key}` must be set together"
                ))),
            }
        };
        let train = load_split("train_src", "train_tgt", Split::Train)?;
        let valid = load_split("valid_src", "valid_tgt", Split::Valid)?;
        let test = load_split("test_src", "test_tgt", Split::Test)?;
        if train.is_empty() {
            return Err(Error::Config("`dataset.train_src` is required".into()));
        }
        let unigram = estimate_unigram(&train.targets(), vocab.len(), 1.0)?;
        let name = cfg.str_or("dataset", "name", "files").to_string();
        Ok((
            SweepData {
                train,
                valid,
                test,
                vocab,
                unigram,
            },
            name,
        ))
    } else {
        let ds = dataset_from_config(cfg)?;
        let name = ds.name.clone();
        Ok((prepare_data(&ds)?, name))
    }
}

fn train_cmd(args: TrainArgs) -> Result<ExitCode> {
    let cfg = Config::load(&args.config)?;
    // A sweep config doubles as a single-run config; `[sweep]` is ignored.
    cfg.expect_sections(&["dataset", "model", "training", "sweep"])?;
    let (data, dataset_name) = data_from_config(&cfg)?;
    if data.valid.is_empty() {
        return Err(Error::Config(
            "training needs a validation split (`dataset.valid_pairs` or `dataset.valid_src`)"
                .into(),
        ));
    }
    let tcfg = training_from_config(&cfg)?;
    let inputs = TrainInputs {
        train: &data.train,
        valid: &data.valid,
        vocab: &data.vocab,
        unigram: &data.unigram,
    };

    let out: TrainOutput = if let Some(ckpt_path) = &args.resume {
        let ckpt = Checkpoint::load(ckpt_path)?;
        println!("resuming from step {} of {}", ckpt.step, ckpt_path.display());
        resume(&ckpt, &inputs, &tcfg)?
    } else {
        let mcfg = model_from_config(&cfg, data.vocab.len())?;
        let bias_name = args
            .bias
            .as_deref()
            .unwrap_or_else(|| cfg.str_or("training", "bias", "zero"));
        let bias_mode = BiasMode::parse(bias_name)?;
        let bias = match bias_mode {
            BiasMode::Zero => BiasInit::zero(),
            BiasMode::None => BiasInit::none(),
            BiasMode::LogUnigram => BiasInit::log_unigram(data.unigram.clone()),
            BiasMode::ExternalLogUnigram => {
                let path = args.external_unigram.as_ref().ok_or_else(|| {
                    Error::Config(
                        "--external-unigram FILE is required with bias external_log_unigram"
                            .into(),
                    )
                })?;
                BiasInit::external_log_unigram(load_unigram_probs(path, data.vocab.len())?)
            }
        };
        let mut model = TransformerModel::new(mcfg, &bias, tcfg.seed)?;
        train(&mut model, &inputs, &tcfg)?
    };

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    out.best.save(&args.out.join("best.ckpt"))?;
    out.last.save(&args.out.join("last.ckpt"))?;
    let rows = ubias::harness::log_to_rows("train", &out.log);
    let curves_path = args.out.join("curves.csv");
    std::fs::write(&curves_path, curves_csv(&rows)).map_err(|e| Error::io(&curves_path, e))?;
    let mut records = Vec::new();
    out.log
        .write_records(&mut records)
        .expect("vec write cannot fail");
    let records_path = args.out.join("records.txt");
    std::fs::write(&records_path, records).map_err(|e| Error::io(&records_path, e))?;
    let mut manifest = cfg.clone();
    manifest.set("run", "dataset", &dataset_name);
    manifest.set("run", "final_step", out.last.step);
    let manifest_path = args.out.join("manifest.txt");
    std::fs::write(&manifest_path, manifest.echo()).map_err(|e| Error::io(&manifest_path, e))?;

    if let Some(param) = &out.log.diverged {
        eprintln!("training diverged ({param}); last checkpoint preserved");
        return Err(Error::Diverged {
            step: out.last.step,
            param: param.clone(),
        });
    }
    if let Some((step, loss)) = out.log.losses.last() {
        println!("final loss: {loss:.4} nats/token at step {step}");
    }
    if let Some((step, score)) = out.log.best {
        println!("best validation BLEU: {score:.2} at step {step}");
    }
    println!("checkpoints: {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn evaluate_cmd(args: EvaluateArgs, ood: bool) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if let Some(vocab_path) = &args.vocab {
        ubias::harness::check_vocab_compatibility(&ckpt, vocab_path)?;
    }
    let src_lines = load_lines(&args.src)?;
    let ref_lines = load_lines(&args.reference)?;
    let scores = if ood {
        evaluate_ood(&ckpt, &src_lines, &ref_lines, args.beam)?
    } else {
        let model = ckpt.to_model();
        let corpus = ParallelCorpus::build(
            &src_lines,
            &ref_lines,
            |l| ckpt.vocab.encode_words(l),
            model.config.vocab_size,
            Split::Test,
        )?;
        evaluate_corpus(&model, &corpus, &ckpt.vocab, args.beam)?
    };
    println!("bleu = {}", scores.bleu);
    println!("chrf = {}", scores.chrf);
    Ok(ExitCode::SUCCESS)
}

fn alc_cmd(args: AlcArgs) -> Result<ExitCode> {
    let text =
        std::fs::read_to_string(&args.curves).map_err(|e| Error::io(&args.curves, e))?;
    let rows = parse_curves(&text)?;
    let points: Vec<(u64, f64)> = rows
        .iter()
        .filter(|r| r.run_id == args.run_id && r.series == args.series)
        .map(|r| (r.step, r.value))
        .collect();
    if points.is_empty() {
        return Err(Error::Data(format!(
            "no `{}` points for run {:?} in {}",
            args.series,
            args.run_id,
            args.curves.display()
        )));
    }
    let curve = LearningCurve::from_points(points)?;
    let value = alc(&curve, args.t_max)?;
    println!("alc = {value}");
    Ok(ExitCode::SUCCESS)
}

fn plot_cmd(args: PlotArgs) -> Result<ExitCode> {
    let results_text =
        std::fs::read_to_string(&args.results).map_err(|e| Error::io(&args.results, e))?;
    let curves_text =
        std::fs::read_to_string(&args.curves).map_err(|e| Error::io(&args.curves, e))?;
    let (dataset, report, order) = parse_results(&results_text)?;
    let rows = parse_curves(&curves_text)?;
    let written = emit_plots(&report, &rows, &dataset, &order, &args.out)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<ExitCode> {
    let vocab_size = 16;
    let config = ModelConfig {
        layers: args.layers,
        heads: 4,
        d_model: args.d_model,
        d_ffn: args.d_model * 2,
        dropout: 0.0,
        vocab_size,
        max_len: 16,
        lm_mode: false,
    };
    config.validate()?;
    let model = TransformerModel::new(config, &BiasInit::zero(), args.seed)?;
    let specs = model.param_specs();
    let names: Vec<String> = specs.iter().map(|(n, _, _)| n.clone()).collect();
    let batch: Vec<(Vec<u32>, Vec<u32>)> = vec![
        (vec![4, 5, 6, 7], vec![7, 6, 5, EOS]),
        (vec![8, 9], vec![9, EOS]),
    ];
    let total_tokens: usize = batch.iter().map(|(_, t)| t.len()).sum();

    let start = std::time::Instant::now();
    let report = gradcheck(
        |tape, ids| {
            let map: HashMap<String, TensorId> = names
                .iter()
                .cloned()
                .zip(ids.iter().copied())
                .collect();
            let staged = model.stage_from_ids(tape, map);
            let mut total: Option<TensorId> = None;
            for (src, tgt) in &batch {
                let logits = staged.logits(tape, src, tgt, &mut None);
                let q: Vec<f64> = tgt
                    .iter()
                    .flat_map(|&y| {
                        ubias::autodiff::smoothed_target_row(y as usize, 0.1, vocab_size)
                    })
                    .collect();
                let qid = tape.constant(q, vec![tgt.len(), vocab_size]);
                let loss = tape.cross_entropy_rows(logits, qid, false);
                total = Some(match total {
                    Some(t) => tape.add(t, loss),
                    None => loss,
                });
            }
            tape.scale(total.expect("nonempty batch"), 1.0 / total_tokens as f64)
        },
        &specs,
        args.h,
        args.tol,
        Some(args.coords),
        args.seed,
    );
    let elapsed = start.elapsed();
    println!(
        "checked {} parameter tensors ({} sampled coordinates each) in {:.1}s",
        specs.len(),
        args.coords,
        elapsed.as_secs_f64()
    );
    println!("max relative error: {:.3e}", report.max_rel_err());
    if report.passed() {
        println!("gradcheck passed (tolerance {:.1e})", args.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        for f in report.failures() {
            eprintln!("failed: {} (rel err {:.3e})", f.name, f.max_rel_err);
        }
        Err(Error::Data(format!(
            "gradcheck failed: max relative error {:.3e} at tolerance {:.1e}",
            report.max_rel_err(),
            args.tol
        )))
    }
}
