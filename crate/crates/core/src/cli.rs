//! The `sentorder` command line: one binary, one subcommand per stage.
//!
//! Every subcommand accepts `--config <file>` holding `key=value` lines,
//! where a key is the long name of one of the subcommand's flags (dashes or
//! underscores). Flags given on the command line win over the file. The
//! effective settings are written as `config.resolved` in the same format
//! before any work starts, so a resolved file can be fed back via
//! `--config` to replay a run.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 for runtime
//! failures. Failures print exactly one line to stderr, of the form
//! `error: usage: <reason>` or `error: runtime: <reason>`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::corpus::{expand_inputs, filter_short_documents, ingest, CorpusStore};
use crate::error::{Error, Result};
use crate::eval::{make_synthetic_corpus, order_accuracy, swap_probe, FinetuneConfig, PairTaskDataset, ProbeProtocol, SyntheticSpec};
use crate::model::{check_gradients, Batch, Model, ModelConfig, GRAD_CHECK_EPS};
use crate::sampler::{parse_residual, read_examples, sample_examples, write_examples, MaskingConfig, OrderScheme, ResidualMass, Sampler, SchemeKind};
use crate::tokenizer::{build_vocab, Vocab};
use crate::train::{load_checkpoint, pretrain, OptimizerConfig, SchedulePlan, TrainConfig};

pub const THREADS_ENV: &str = "SENTORDER_THREADS";
pub const RESOLVED_FILE: &str = "config.resolved";

#[derive(Parser, Debug)]
#[command(name = "sentorder", version, about = "Sentence-order pre-training toolkit")]
struct Cli {
    /// Worker threads; outputs do not depend on this value.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    /// key=value file supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read one-sentence-per-line text files into a corpus store.
    Ingest(IngestArgs),
    /// Build a frequency vocabulary from a store.
    BuildVocab(BuildVocabArgs),
    /// Draw labelled, masked sentence-pair examples from a store.
    Sample(SampleArgs),
    /// Pre-train an encoder with masked LM plus an order objective.
    Pretrain(PretrainArgs),
    /// Order-classification accuracy of a checkpoint on an examples file.
    EvalOrder(EvalOrderArgs),
    /// Fit binary heads on frozen features and compare input orders.
    ProbeSwap(ProbeSwapArgs),
    /// Generate the synthetic corpus and pair task.
    MakeSynthetic(MakeSyntheticArgs),
    /// Finite-difference check of all model gradients on a tiny config.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Input files or glob patterns, read in the given order.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<String>,
    #[arg(long, default_value_t = 2)]
    min_sentences: usize,
    /// Store directory.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    #[arg(long)]
    store: PathBuf,
    /// Maximum vocabulary size, special tokens included.
    #[arg(long, default_value_t = 30_000)]
    size: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SchemeArgs {
    #[arg(long, value_parser = parse_scheme)]
    scheme: SchemeKind,
    /// Mass kept on the mapped class for in-adjacent labels (pnsmth).
    #[arg(long, default_value_t = 0.8)]
    smoothing_factor: f64,
    /// Where the rest of the smoothed mass goes: uniform or diffdoc.
    #[arg(long, default_value = "uniform", value_parser = parse_residual_flag)]
    residual: ResidualMass,
}

impl SchemeArgs {
    fn scheme(&self) -> Result<OrderScheme> {
        let s = OrderScheme { smoothing_factor: self.smoothing_factor, residual: self.residual, ..OrderScheme::new(self.scheme) };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    /// Independent sampling streams; part of the output's identity.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    scheme: SchemeArgs,
    /// Total updates; defaults to the sum of --phases, else 3000.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    warmup: f64,
    /// Length phases as `len:steps,len:steps`.
    #[arg(long)]
    phases: Option<String>,
    /// Sequence length when --phases is absent.
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many updates, checkpointing to `step-<n>`.
    #[arg(long)]
    stop_at: Option<u64>,
    /// Peak learning rate; defaults to 1e-3 for desk/tiny and 1e-4 for base.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    metrics_every: u64,
    /// Examples per gradient tape.
    #[arg(long, default_value_t = 4)]
    chunk_size: usize,
    /// Model size preset: desk, base or tiny.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    /// Defaults to the larger of the preset value and the longest phase.
    #[arg(long)]
    max_position: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    layer_norm_eps: Option<f64>,
    #[arg(long)]
    init_std: Option<f64>,
    /// tanh or erf.
    #[arg(long)]
    gelu: Option<String>,
}

#[derive(Args, Debug)]
struct EvalOrderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeSwapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pair-task TSV.
    #[arg(long)]
    dataset: PathBuf,
    /// Defaults to `vocab.txt` in the checkpoint directory or its parent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    /// refit or fixed-head.
    #[arg(long, default_value = "refit", value_parser = parse_protocol)]
    protocol: ProbeProtocol,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MakeSyntheticArgs {
    #[arg(long, default_value_t = 200)]
    docs: usize,
    #[arg(long, default_value_t = 12)]
    sentences: usize,
    #[arg(long, default_value_t = 50)]
    heldout_docs: usize,
    #[arg(long, default_value_t = 200)]
    pair_docs: usize,
    /// Pair-task examples per split.
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    #[arg(long, default_value_t = 96)]
    vocab_size: usize,
    /// Length of the step cycle.
    #[arg(long, default_value_t = 24)]
    cycle: usize,
    #[arg(long, default_value_t = 3)]
    words_min: usize,
    #[arg(long, default_value_t = 8)]
    words_max: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 10)]
    seed: u64,
    #[arg(long, default_value = "pn3", value_parser = parse_scheme)]
    scheme: SchemeKind,
    /// Examples in the checked batch.
    #[arg(long, default_value_t = 2)]
    examples: usize,
    #[arg(long, default_value_t = GRAD_CHECK_EPS)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Optional report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_scheme(s: &str) -> std::result::Result<SchemeKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_residual_flag(s: &str) -> std::result::Result<ResidualMass, String> {
    parse_residual(s).map_err(|e| e.to_string())
}

fn parse_protocol(s: &str) -> std::result::Result<ProbeProtocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs the command line `argv` (program name first) and returns the exit
/// status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    match run(argv) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: usage: {}", one_line(&msg));
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: runtime: {}", one_line(&e.to_string()));
            2
        }
    }
}

fn run(argv: Vec<OsString>) -> std::result::Result<(), Failure> {
    let argv = merge_config(argv)?;
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(std::io::stdout(), "{e}");
                    Ok(())
                }
                ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = writeln!(std::io::stdout(), "{}", Cli::command().render_help());
                    Err(Failure::Usage(clap_reason(&e)))
                }
                _ => Err(Failure::Usage(clap_reason(&e))),
            };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Failure::Usage(clap_reason(&e)))?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let resolved = resolved_text(&cli, name, sub);

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Failure::Runtime(Error::invalid(format!("thread pool: {e}"))))?;
    pool.install(|| execute(cli.command, &resolved))
}

/// Clap's message up to its usage hint, joined onto one line.
fn clap_reason(e: &clap::Error) -> String {
    let text = e.to_string();
    let body: Vec<&str> = text
        .lines()
        .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let reason = body.join(" ");
    let reason = reason.trim_start_matches("error:").trim();
    if reason.is_empty() {
        "invalid arguments".into()
    } else {
        reason.to_string()
    }
}

/// Adds `key=value` for each derived setting the command line left unset.
fn with_effective(resolved: &str, values: &[(&str, String)]) -> String {
    let mut s = resolved.to_string();
    for (key, value) in values {
        if !s.lines().any(|l| l.split_once('=').is_some_and(|(k, _)| k == *key)) {
            let _ = writeln!(s, "{key}={value}");
        }
    }
    s
}

fn subcommand_name(argv: &[OsString]) -> Option<String> {
    let cmd = Cli::command();
    argv.iter().skip(1).filter_map(|a| a.to_str()).find(|a| cmd.find_subcommand(a).is_some()).map(str::to_string)
}

fn config_path(argv: &[OsString]) -> std::result::Result<Option<PathBuf>, Failure> {
    for (i, a) in argv.iter().enumerate() {
        let Some(a) = a.to_str() else { continue };
        if a == "--config" {
            return argv
                .get(i + 1)
                .map(|p| Some(PathBuf::from(p)))
                .ok_or_else(|| Failure::Usage("--config needs a file".into()));
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Ok(Some(PathBuf::from(p)));
        }
    }
    Ok(None)
}

/// Appends `--key value` for every config-file entry whose flag is absent
/// from `argv`.
fn merge_config(mut argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, Failure> {
    let Some(path) = config_path(&argv)? else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| Failure::Runtime(Error::Io { path: path.clone(), source: e }))?;
    let Some(name) = subcommand_name(&argv) else { return Ok(argv) };
    let root = Cli::command();
    let sub = root.find_subcommand(&name).expect("known subcommand").clone();
    let present: Vec<String> = argv
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let mut extra: Vec<OsString> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let flag = key.trim().replace('_', "-");
        let value = value.trim();
        if flag == "config" {
            continue;
        }
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(flag.as_str()))
            .ok_or_else(|| Failure::Usage(format!("{}:{}: {key} is not a flag of {name}", path.display(), n + 1)))?;
        if present.contains(&flag) {
            continue;
        }
        extra.push(format!("--{flag}").into());
        let multi = arg.get_num_args().is_some_and(|r| r.max_values() > 1);
        if multi {
            extra.extend(value.split_whitespace().map(OsString::from));
        } else {
            extra.push(value.into());
        }
    }
    argv.extend(extra);
    Ok(argv)
}

fn resolved_text(cli: &Cli, name: &str, sub: &ArgMatches) -> String {
    let mut s = format!("# sentorder {name}\n");
    if let Some(t) = cli.threads {
        let _ = writeln!(s, "threads={t}");
    }
    let root = Cli::command();
    let cmd = root.find_subcommand(name).expect("known subcommand");
    for arg in cmd.get_arguments() {
        let id = arg.get_id().as_str();
        if matches!(id, "help" | "version" | "threads" | "config") {
            continue;
        }
        let Some(long) = arg.get_long() else { continue };
        let Some(values) = sub.get_raw(id) else { continue };
        let joined: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
        let _ = writeln!(s, "{}={}", long.replace('-', "_"), joined.join(" "));
    }
    s
}

fn write_resolved(dir: &Path, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(RESOLVED_FILE);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// `config.resolved` next to a file output: `<file>.config.resolved`.
fn write_resolved_beside(file: &Path, text: &str) -> Result<()> {
    if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut name = file.as_os_str().to_owned();
    name.push(".");
    name.push(RESOLVED_FILE);
    let p = PathBuf::from(name);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(command: Command, resolved: &str) -> std::result::Result<(), Failure> {
    match command {
        Command::Ingest(a) => {
            write_resolved(&a.output, resolved)?;
            let files = expand_inputs(&a.input)?;
            let store = filter_short_documents(&ingest(&files)?, a.min_sentences)?;
            store.save(&a.output)?;
            println!("documents={} sentences={}", store.len(), store.sentence_count());
        }
        Command::BuildVocab(a) => {
            write_resolved_beside(&a.output, resolved)?;
            let vocab = build_vocab(&CorpusStore::load(&a.store)?, a.size)?;
            vocab.save(&a.output)?;
            println!("vocab_size={}", vocab.len());
        }
        Command::Sample(a) => {
            write_resolved_beside(&a.output, resolved)?;
            let scheme = a.scheme.scheme()?;
            let store = CorpusStore::load(&a.store)?;
            let vocab = Vocab::load(&a.vocab)?;
            let sampler = Sampler::new(&store, &vocab, scheme, a.max_len, MaskingConfig::default())?;
            let examples = sample_examples(&sampler, a.seed, a.count, a.workers)?;
            write_examples(&a.output, &scheme, &examples)?;
            println!("examples={}", examples.len());
        }
        Command::Pretrain(a) => run_pretrain(a, resolved)?,
        Command::EvalOrder(a) => {
            write_resolved_beside(&a.out, resolved)?;
            let (model, scheme) = load_checkpoint(&a.checkpoint)?;
            let (file_scheme, mut examples) = read_examples(&a.examples)?;
            if file_scheme.kind != scheme.kind {
                return Err(Error::invalid(format!("examples were drawn under {}, checkpoint was trained under {}", file_scheme.kind, scheme.kind)).into());
            }
            for e in &mut examples {
                e.tokens = e.original_tokens();
                e.mlm_positions.clear();
                e.mlm_labels.clear();
            }
            let report = order_accuracy(&model, &scheme, &examples)?;
            write_text(&a.out, &report.to_json())?;
            println!("accuracy={} n={}", report.accuracy_original, report.n);
        }
        Command::ProbeSwap(a) => {
            let vocab_path = match a.vocab {
                Some(p) => p,
                None => find_vocab(&a.checkpoint)?,
            };
            write_resolved_beside(&a.out, &with_effective(resolved, &[("vocab", vocab_path.display().to_string())]))?;
            let (model, scheme) = load_checkpoint(&a.checkpoint)?;
            let vocab = Vocab::load(&vocab_path)?;
            let dataset = PairTaskDataset::load(&a.dataset)?;
            let cfg = FinetuneConfig {
                epochs: a.epochs,
                lr: a.lr,
                batch_size: a.batch_size,
                weight_decay: a.weight_decay,
                runs: a.runs,
                seed: a.seed,
                max_len: a.max_len,
                protocol: a.protocol,
            };
            let report = swap_probe(&model, &scheme, &vocab, &dataset, &cfg)?;
            write_text(&a.out, &report.to_json())?;
            println!(
                "accuracy_original={} accuracy_swapped={} delta={}",
                report.accuracy_original,
                report.accuracy_swapped.unwrap_or(f64::NAN),
                report.delta.unwrap_or(f64::NAN)
            );
        }
        Command::MakeSynthetic(a) => {
            write_resolved(&a.out, resolved)?;
            let spec = SyntheticSpec {
                docs: a.docs,
                sentences: a.sentences,
                heldout_docs: a.heldout_docs,
                pair_docs: a.pair_docs,
                pairs_per_split: a.pairs,
                vocab_size: a.vocab_size,
                cycle: a.cycle,
                words_min: a.words_min,
                words_max: a.words_max,
            };
            let corpus = make_synthetic_corpus(&spec, a.seed)?;
            corpus.save(&a.out)?;
            println!("documents={} heldout={} pairs={}", corpus.train.len(), corpus.heldout.len(), corpus.pairs.examples.len());
        }
        Command::GradCheck(a) => {
            if let Some(out) = &a.out {
                write_resolved_beside(out, resolved)?;
            }
            let line = grad_check_line(&a)?;
            println!("{line}");
            if let Some(out) = &a.out {
                write_text(out, &format!("{line}\n"))?;
            }
        }
    }
    Ok(())
}

fn find_vocab(checkpoint: &Path) -> Result<PathBuf> {
    let here = checkpoint.join("vocab.txt");
    if here.exists() {
        return Ok(here);
    }
    match checkpoint.parent().map(|p| p.join("vocab.txt")) {
        Some(p) if p.exists() => Ok(p),
        _ => Err(Error::invalid(format!("no vocab.txt in or above {}; pass --vocab", checkpoint.display()))),
    }
}

fn model_config(a: &PretrainArgs, vocab: usize, classes: usize, plan: &SchedulePlan) -> std::result::Result<ModelConfig, Failure> {
    let mut cfg = match a.preset.as_str() {
        "desk" => ModelConfig::desk(vocab, classes),
        "base" => ModelConfig::base(vocab, classes),
        "tiny" => ModelConfig::tiny(vocab, classes),
        other => return Err(Failure::Usage(format!("unknown preset {other:?} (expected desk, base or tiny)"))),
    };
    cfg.max_position = cfg.max_position.max(plan.max_seq_len());
    let overrides = [
        ("layers", a.layers.map(|v| v.to_string())),
        ("heads", a.heads.map(|v| v.to_string())),
        ("hidden", a.hidden.map(|v| v.to_string())),
        ("ffn", a.ffn.map(|v| v.to_string())),
        ("max_position", a.max_position.map(|v| v.to_string())),
        ("dropout", a.dropout.map(|v| v.to_string())),
        ("layer_norm_eps", a.layer_norm_eps.map(|v| v.to_string())),
        ("init_std", a.init_std.map(|v| v.to_string())),
        ("gelu", a.gelu.clone()),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v).map_err(|e| Failure::Usage(e.to_string()))?;
        }
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run_pretrain(a: PretrainArgs, resolved: &str) -> std::result::Result<(), Failure> {
    let plan = match &a.phases {
        Some(text) => {
            let phases = SchedulePlan::parse_phases(text).map_err(|e| Failure::Usage(e.to_string()))?;
            let total = a.steps.unwrap_or_else(|| phases.iter().map(|p| p.steps).sum());
            SchedulePlan { total_steps: total, warmup_fraction: a.warmup, phases }
        }
        None => SchedulePlan { warmup_fraction: a.warmup, ..SchedulePlan::single(a.steps.unwrap_or(3000), a.max_len) },
    };
    plan.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let scheme = a.scheme.scheme().map_err(|e| Failure::Usage(e.to_string()))?;
    let vocab = Vocab::load(&a.vocab)?;
    let cfg = model_config(&a, vocab.len(), scheme.num_classes(), &plan)?;
    let base_opt = if a.preset == "base" { OptimizerConfig::default() } else { OptimizerConfig::desk() };
    let opt = OptimizerConfig { lr_max: a.lr.unwrap_or(base_opt.lr_max), weight_decay: a.weight_decay, ..base_opt };
    let gelu = cfg.kv_pairs().into_iter().find(|(k, _)| *k == "gelu").map(|(_, v)| v).unwrap_or_default();
    let effective = [
        ("steps", plan.total_steps.to_string()),
        ("lr", opt.lr_max.to_string()),
        ("layers", cfg.layers.to_string()),
        ("heads", cfg.heads.to_string()),
        ("hidden", cfg.hidden.to_string()),
        ("ffn", cfg.ffn.to_string()),
        ("max_position", cfg.max_position.to_string()),
        ("dropout", cfg.dropout.to_string()),
        ("layer_norm_eps", cfg.layer_norm_eps.to_string()),
        ("init_std", cfg.init_std.to_string()),
        ("gelu", gelu),
    ];
    write_resolved(&a.out, &with_effective(resolved, &effective))?;

    let store = CorpusStore::load(&a.store)?;
    let tc = TrainConfig { batch_size: a.batch_size, metrics_every: a.metrics_every, chunk_size: a.chunk_size, seed: a.seed, stop_at: a.stop_at };
    vocab.save(&a.out.join("vocab.txt"))?;
    let sampler = Sampler::new(&store, &vocab, scheme, plan.phases[0].max_seq_len, MaskingConfig::default())?;
    let summary = pretrain(&sampler, &cfg, &opt, &plan, &tc, &a.out, a.resume.as_deref())?;
    let last = summary.metrics.last();
    println!(
        "step={} checkpoint={} order_loss={} order_acc={}",
        summary.state_step,
        summary.checkpoint.display(),
        last.map_or(f64::NAN, |m| m.order_loss),
        last.map_or(f64::NAN, |m| m.order_acc)
    );
    Ok(())
}

fn grad_check_line(a: &GradCheckArgs) -> Result<String> {
    if a.examples == 0 {
        return Err(Error::invalid("--examples must be >= 1"));
    }
    let spec = SyntheticSpec { docs: 4, sentences: 6, heldout_docs: 2, pair_docs: 0, pairs_per_split: 0, vocab_size: 30, cycle: 5, words_min: 2, words_max: 4 };
    let corpus = make_synthetic_corpus(&spec, a.seed)?;
    let vocab = build_vocab(&corpus.train, 1000)?;
    let scheme = OrderScheme::new(a.scheme);
    let sampler = Sampler::new(&corpus.train, &vocab, scheme, 24, MaskingConfig::default())?;
    let examples = sample_examples(&sampler, a.seed, a.examples, 1)?;
    let model = Model::new(ModelConfig::tiny(vocab.len(), scheme.num_classes()), a.seed)?;
    let batch = Batch::from_examples(&examples, scheme.num_classes(), model.config.max_position)?;
    let report = check_gradients(&model, &batch, a.eps)?;
    let worst = report
        .worst
        .map(|(i, c)| format!("{}[{c}]", model.params.names()[i]))
        .unwrap_or_else(|| "none".into());
    if !(report.max_rel_error <= a.tolerance) {
        return Err(Error::invalid(format!(
            "gradient check failed: max_rel_error={} at {worst} exceeds tolerance {}",
            report.max_rel_error, a.tolerance
        )));
    }
    Ok(format!("max_rel_error={} worst={worst} coordinates={} tolerance={}", report.max_rel_error, report.coordinates, a.tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<OsString> {
        std::iter::once("sentorder").chain(s.split_whitespace()).map(OsString::from).collect()
    }

    #[test]
    fn help_and_usage_codes() {
        assert_eq!(dispatch(argv("--help")), 0);
        assert_eq!(dispatch(argv("frobnicate")), 1);
        assert_eq!(dispatch(argv("pretrain --vocab v.txt --scheme pn3 --seed 1 --out /tmp/x")), 1);
        let e = Cli::command().try_get_matches_from(["sentorder", "pretrain", "--vocab", "v"]).unwrap_err();
        let reason = clap_reason(&e);
        assert!(reason.contains("--store") && !reason.contains('\n'), "{reason}");
        assert_eq!(dispatch(argv("sample --store s --vocab v --scheme pn3 --count 3 --output o")), 1);
        assert_eq!(dispatch(argv("sample --store s --vocab v --scheme pn9 --count 3 --seed 1 --output o")), 1);
    }

    #[test]
    fn help_lists_every_subcommand() {
        let help = Cli::command().render_help().to_string();
        for name in ["ingest", "build-vocab", "sample", "pretrain", "eval-order", "probe-swap", "make-synthetic", "grad-check"] {
            assert!(help.contains(name), "{name} missing from help");
        }
    }

    #[test]
    fn missing_input_is_a_runtime_failure() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("store");
        let code = dispatch(argv(&format!("ingest --input {}/nope.txt --output {}", dir.path().display(), out.display())));
        assert_eq!(code, 2);
    }

    #[test]
    fn config_file_fills_absent_flags_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "# defaults\ndocs=7\nsentences = 5\npairs=0\nseed=3\n").unwrap();
        let out = dir.path().join("syn");
        let code = dispatch(argv(&format!("make-synthetic --config {} --sentences 4 --out {}", cfg.display(), out.display())));
        assert_eq!(code, 0);
        let resolved = fs::read_to_string(out.join(RESOLVED_FILE)).unwrap();
        assert!(resolved.contains("\ndocs=7\n"), "{resolved}");
        assert!(resolved.contains("\nsentences=4\n"), "{resolved}");
        assert!(resolved.contains("\nseed=3\n"), "{resolved}");
        let store = crate::corpus::ingest(&[out.join("train.txt")]).unwrap();
        assert_eq!(store.len(), 7);
        assert_eq!(store.sentence_count(), 28);

        let replay = dir.path().join("replay");
        let code = dispatch(argv(&format!("make-synthetic --config {} --out {}", out.join(RESOLVED_FILE).display(), replay.display())));
        assert_eq!(code, 0);
        assert_eq!(fs::read(out.join("train.txt")).unwrap(), fs::read(replay.join("train.txt")).unwrap());
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "colour=blue\n").unwrap();
        assert_eq!(dispatch(argv(&format!("make-synthetic --config {} --seed 1 --out {}", cfg.display(), dir.path().display()))), 1);
    }

    #[test]
    fn grad_check_subcommand_passes() {
        assert_eq!(dispatch(argv("grad-check --threads 1")), 0);
        assert_eq!(dispatch(argv("grad-check --tolerance 1e-30")), 2);
    }
}
