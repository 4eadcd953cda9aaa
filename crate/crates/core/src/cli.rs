//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed check or invalid input, 2 I/O or config
//! error.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::{generate_corpus, load_corpus, parse_corpus, Difficulty, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::mask_proposal::{MaskPlan, ProposalDistribution};
use crate::masking::{corrupt, mixed_mask, num_masked, ExplorationSchedule};
use crate::model::Model;
use crate::oracle::{self, Suite, SuiteResult};
use crate::trainer::{
    stream_rng, steps_to_threshold, train, EvalSet, RunOptions, Stream, TrainConfig, TrainState,
};
use crate::variance_lab::{
    decompose, mc_variance_decomposition, optimal_subset_proposal, McOptions, McProposal, RatioKind,
    SubsetTable, VarianceReport, WeightedTable, ENUMERATION_CAP,
};

pub const SEED_ENV: &str = "MASKVAR_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "maskvar", version, about = "Masked language model training with a learned mask proposal")]
struct Cli {
    /// Worker cap. All work currently runs on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the encoder and the proposal network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out set.
    Eval(EvalArgs),
    /// Split gradient variance into mask and sentence terms.
    AuditVariance(AuditArgs),
    /// Draw mask plans from a checkpoint's proposal.
    SampleMasks(SampleArgs),
    /// Run a built-in property suite.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the config seed; falls back to $MASKVAR_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Pin explore_p to 1: plain uniform masking.
    #[arg(long)]
    baseline_uniform: bool,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Continue from a checkpoint, appending to the metrics file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Eval loss for `steps_to_threshold` in the summary.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AuditMode {
    Exact,
    Mc,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Defaults to a fresh model built from the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sentence file; defaults to the held-out set.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Masked positions per sentence; defaults to the mask rate.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value_t = AuditMode::Exact)]
    mode: AuditMode,
    /// Mask draws per sentence in mc mode.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    sentences: usize,
    #[arg(long, default_value_t = ENUMERATION_CAP)]
    cap: usize,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Number of plans; sentences are cycled.
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Probability of the uniform branch.
    #[arg(long, default_value_t = 0.0)]
    explore_p: f64,
    /// Write here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// decomposition, unbiasedness, optimality, correlation or all.
    suite: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps for the correlation suite.
    #[arg(long, default_value_t = oracle::CORRELATION_STEPS)]
    steps: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_IO } else { EXIT_OK };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return EXIT_IO;
    }
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::AuditVariance(a) => cmd_audit_variance(a),
        Command::SampleMasks(a) => cmd_sample_masks(a),
        Command::Oracle(a) => cmd_oracle(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Config { .. } | Error::Parse { .. } | Error::Format(_) | Error::Resource { .. } => {
            EXIT_IO
        }
        _ => EXIT_FAILED,
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config {
            field: SEED_ENV.into(),
            message: format!("cannot parse `{v}`"),
        }),
        Err(_) => Ok(None),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            c.apply_override(o)?;
        }
        if let Some(s) = self.seed.or(env_seed()?) {
            c.train.seed = s;
        }
        Ok(c)
    }
}

/// Vocabulary, training sentences and held-out sentences for a config.
#[derive(Debug, Clone)]
pub struct Data {
    pub vocab: Vocabulary,
    pub train: Vec<TokenSequence>,
    pub eval: Vec<TokenSequence>,
    /// Per-position difficulty of `eval`, synthetic corpora only.
    pub eval_labels: Option<Vec<Vec<Difficulty>>>,
}

/// Builds the data a config describes. Without a corpus file the grammar
/// generates both sets, seeded by `data_seed` and `eval_seed`. With a
/// corpus file and no eval file, the first `eval_sentences` training
/// sentences double as the eval set.
pub fn load_data(c: &RunConfig) -> Result<Data> {
    match &c.corpus {
        None => {
            let vocab = c.grammar.vocabulary();
            let train = generate_corpus(&c.grammar, c.train_sentences, &mut ChaCha8Rng::seed_from_u64(c.data_seed));
            let eval = generate_corpus(&c.grammar, c.eval_sentences, &mut ChaCha8Rng::seed_from_u64(c.eval_seed));
            Ok(Data {
                vocab,
                train: train.sentences,
                eval: eval.sentences,
                eval_labels: Some(eval.labels),
            })
        }
        Some(path) => {
            let vocab = match &c.vocab {
                Some(v) => Vocabulary::load(v)?,
                None => {
                    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    Vocabulary::from_tokens(unique_tokens(&text))?
                }
            };
            let train = load_corpus(path, &vocab)?;
            let eval = match &c.eval_corpus {
                Some(p) => load_corpus(p, &vocab)?,
                None => train.iter().take(c.eval_sentences).cloned().collect(),
            };
            if train.is_empty() {
                return Err(Error::Config {
                    field: "corpus".into(),
                    message: "no sentences".into(),
                });
            }
            Ok(Data {
                vocab,
                train,
                eval,
                eval_labels: None,
            })
        }
    }
}

fn unique_tokens(text: &str) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    text.split_whitespace()
        .filter(|t| seen.insert(*t))
        .map(str::to_string)
        .collect()
}

fn too_long(data: &Data, max_seq_len: usize) -> Result<()> {
    match data.train.iter().chain(&data.eval).map(TokenSequence::len).max() {
        Some(n) if n > max_seq_len => Err(Error::Config {
            field: "max_seq_len".into(),
            message: format!("corpus has a sentence of {n} tokens"),
        }),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).expect("json");
    println!("{s}");
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub baseline_uniform: bool,
    pub steps: u64,
    pub final_eval_loss: Option<f64>,
    pub threshold: Option<f64>,
    pub steps_to_threshold: Option<u64>,
    pub eval_curve: Vec<(u64, f64)>,
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut rc = a.cfg.resolve()?;
    if a.baseline_uniform {
        rc.train.baseline_uniform = true;
    }
    if let Some(o) = &a.output {
        rc.output_dir = o.clone();
    }
    let data = load_data(&rc)?;
    rc.validate(data.vocab.len())?;
    too_long(&data, rc.max_seq_len)?;

    let (mut state, config): (TrainState, TrainConfig) = match &a.resume {
        Some(p) => checkpoint::load(p)?,
        None => (TrainState::new(rc.encoder_config(data.vocab.len()), rc.train.seed)?, rc.train_config()),
    };
    if state.model.config().vocab_size < data.vocab.len() {
        return Err(Error::Config {
            field: "vocab_size".into(),
            message: "checkpoint vocabulary is smaller than the corpus vocabulary".into(),
        });
    }

    let out = &rc.output_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    fs::write(out.join("config.txt"), RunConfig { train: config.clone(), ..rc.clone() }.to_text())
        .map_err(|e| Error::io(out.join("config.txt"), e))?;
    data.vocab.save(&out.join("vocab.txt"))?;

    let metrics_path = out.join("metrics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let eval = EvalSet::new(data.eval.clone(), config.mask_rate, rc.eval_seed)?;
    let summary = train(&config, &mut state, &data.train, RunOptions {
        eval: (!eval.is_empty()).then_some(&eval),
        metrics: Some(&mut metrics),
        checkpoint_dir: Some(&ckpt_dir),
        ..RunOptions::default()
    })?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    checkpoint::save(&out.join("final.mvar"), &state, &config)?;

    let s = TrainSummary {
        seed: config.seed,
        baseline_uniform: config.baseline_uniform,
        steps: state.step,
        final_eval_loss: summary.final_eval(),
        threshold: a.threshold,
        steps_to_threshold: a.threshold.and_then(|t| steps_to_threshold(&summary.eval_curve, t)),
        eval_curve: summary.eval_curve,
    };
    write_json(&out.join("summary.json"), &s)?;
    Ok(EXIT_OK)
}

fn load_model(path: Option<&Path>, rc: &RunConfig, data: &Data) -> Result<(Model, TrainConfig)> {
    match path {
        Some(p) => {
            let (state, config) = checkpoint::load(p)?;
            Ok((state.model, config))
        }
        None => {
            rc.validate(data.vocab.len())?;
            let model = Model::new(rc.encoder_config(data.vocab.len()), &mut stream_rng(rc.train.seed, Stream::Init))?;
            Ok((model, rc.train_config()))
        }
    }
}

type Labelled = (Vec<TokenSequence>, Option<Vec<Vec<Difficulty>>>);

fn sentences_for(path: Option<&Path>, data: &Data) -> Result<Labelled> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok((parse_corpus(&text, &data.vocab)?, None))
        }
        None => Ok((data.eval.clone(), data.eval_labels.clone())),
    }
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub step: u64,
    pub eval_loss: f64,
    pub sentences: usize,
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let rc = a.cfg.resolve()?;
    let data = load_data(&rc)?;
    let (state, config) = checkpoint::load(&a.checkpoint)?;
    let eval = EvalSet::new(data.eval, config.mask_rate, rc.eval_seed)?;
    print_json(&EvalReport {
        step: state.step,
        eval_loss: eval.loss(&state.model)?,
        sentences: eval.len(),
    })?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
pub struct AuditReport {
    pub mode: &'static str,
    pub k: Option<usize>,
    pub num_sentences: usize,
    pub uniform: VarianceReport,
    pub mapnet: VarianceReport,
    /// Exact mode only.
    pub optimal: Option<VarianceReport>,
    /// `mapnet.mask_term / uniform.mask_term`.
    pub mask_term_ratio: f64,
}

fn cmd_audit_variance(a: AuditArgs) -> Result<i32> {
    let rc = a.cfg.resolve()?;
    let data = load_data(&rc)?;
    let (model, config) = load_model(a.checkpoint.as_deref(), &rc, &data)?;
    let (mut sentences, _) = sentences_for(a.corpus.as_deref(), &data)?;
    sentences.truncate(a.sentences);
    if sentences.is_empty() {
        return Err(Error::Argument("no sentences to audit".into()));
    }
    let k_of = |x: &TokenSequence| a.k.unwrap_or_else(|| num_masked(x.len(), config.mask_rate));
    let report = match a.mode {
        AuditMode::Exact => {
            let tables = sentences
                .iter()
                .map(|x| SubsetTable::from_model(&model, x, k_of(x), a.cap))
                .collect::<Result<Vec<_>>>()?;
            let uniform = decompose(&tables.iter().map(WeightedTable::uniform).collect::<Vec<_>>())?;
            let mapnet = tables
                .iter()
                .zip(&sentences)
                .map(|(t, x)| WeightedTable::from_proposal(t, &model.mapnet.propose(&model.store, x.tokens())?, RatioKind::Exact))
                .collect::<Result<Vec<_>>>()?;
            let mapnet = decompose(&mapnet)?;
            let optimal = tables
                .iter()
                .map(|t| WeightedTable::over_subsets(t, optimal_subset_proposal(t)?))
                .collect::<Result<Vec<_>>>()?;
            let optimal = decompose(&optimal)?;
            AuditReport {
                mode: "exact",
                k: a.k,
                num_sentences: sentences.len(),
                mask_term_ratio: ratio(mapnet.mask_term, uniform.mask_term),
                uniform,
                mapnet,
                optimal: Some(optimal),
            }
        }
        AuditMode::Mc => {
            let opts = McOptions {
                num_samples: a.samples,
                k: a.k,
                ..McOptions::default()
            };
            let seed = config.seed;
            let uniform = mc_variance_decomposition(&model, &sentences, McProposal::Uniform, opts, &mut stream_rng(seed, Stream::Mask))?;
            let mapnet = mc_variance_decomposition(&model, &sentences, McProposal::MapNet, opts, &mut stream_rng(seed, Stream::Mask))?;
            AuditReport {
                mode: "mc",
                k: a.k,
                num_sentences: sentences.len(),
                mask_term_ratio: ratio(mapnet.mask_term, uniform.mask_term),
                uniform,
                mapnet,
                optimal: None,
            }
        }
    };
    print_json(&report)?;
    let bad = a.mode == AuditMode::Exact
        && [&report.uniform, &report.mapnet]
            .iter()
            .chain(report.optimal.as_ref().iter())
            .any(|r| r.relative_residual() > oracle::DECOMPOSITION_TOLERANCE);
    if bad {
        eprintln!("error: decomposition residual above {:e} of the total", oracle::DECOMPOSITION_TOLERANCE);
        return Ok(EXIT_FAILED);
    }
    Ok(EXIT_OK)
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

/// One line of `sample-masks` output.
#[derive(Debug, Serialize)]
pub struct SampledMask {
    pub sentence: usize,
    pub tokens: Vec<String>,
    pub proposal: Vec<f64>,
    pub plan: MaskPlan,
    /// Per-position difficulty, synthetic corpora only.
    pub labels: Option<Vec<Difficulty>>,
}

fn cmd_sample_masks(a: SampleArgs) -> Result<i32> {
    let rc = a.cfg.resolve()?;
    let data = load_data(&rc)?;
    let (model, config) = load_model(a.checkpoint.as_deref(), &rc, &data)?;
    let schedule = ExplorationSchedule::pinned(a.explore_p);
    schedule.validate()?;
    let (sentences, labels) = sentences_for(a.corpus.as_deref(), &data)?;
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    if a.count > 0 && sentences.is_empty() {
        return Err(Error::Argument("no sentences to sample from".into()));
    }
    let mut mask_rng = stream_rng(config.seed, Stream::Mask);
    let mut corrupt_rng = stream_rng(config.seed, Stream::Corruption);
    for i in 0..a.count {
        let s = i % sentences.len();
        let x = &sentences[s];
        let proposal: ProposalDistribution = model.mapnet.propose(&model.store, x.tokens())?;
        let mut plan = mixed_mask(x, 0, &schedule, || Ok(proposal.clone()), config.mask_rate, config.eps_clip, &mut mask_rng)?;
        corrupt(x, &mut plan, model.config().vocab_size, &mut corrupt_rng)?;
        let line = SampledMask {
            sentence: s,
            tokens: x.tokens().iter().map(|&t| data.vocab.token(t).unwrap_or("[UNK]").to_string()).collect(),
            proposal: proposal.0,
            plan,
            labels: labels.as_ref().map(|l| l[s].clone()),
        };
        let text = serde_json::to_string(&line).expect("json");
        writeln!(out, "{text}").map_err(|e| Error::io("<output>", e))?;
    }
    out.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(EXIT_OK)
}

fn cmd_oracle(a: OracleArgs) -> Result<i32> {
    let suites: Vec<Suite> = if a.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![Suite::parse(&a.suite).ok_or_else(|| Error::Config {
            field: "suite".into(),
            message: format!("unknown suite `{}`; expected decomposition, unbiasedness, optimality, correlation or all", a.suite),
        })?]
    };
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let mut results: Vec<SuiteResult> = Vec::new();
    for s in suites {
        let r = match s {
            Suite::Correlation => oracle::correlation_suite(seed, a.steps)?,
            _ => oracle::run_suite(s, seed)?,
        };
        for c in r.failures() {
            eprintln!("FAIL {}: {} = {:e}, expected {}", s.name(), c.name, c.value, c.expect);
        }
        results.push(r);
    }
    match &a.output {
        Some(p) => write_json(p, &results)?,
        None => print_json(&results)?,
    }
    Ok(if results.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_FAILED })
}
