//! The `attncnn` command-line front end.
//!
//! Settings come from an optional TOML file (`--config`) with one table per
//! concern (`[data]`, `[model]`, `[embeddings]`, `[train]`, `[evaluate]`,
//! `[transfer]`, `[explain]`, `[sweep]`). Command-line flags override the
//! file, and the file overrides the preset. Every artifact of a run goes
//! into `<out>/<timestamp>-seed<seed>-<command>` unless `--run-dir` names a
//! directory explicitly.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_vocab, default_s_max, read_tsv, write_tsv, Dataset, LabeledSentence, Vocabulary,
};
use crate::embeddings::{EmbeddingVariant, DEFAULT_EMBED_DIM};
use crate::error::Error;
use crate::explain::{export_report, word_distribution, ExportFormat};
use crate::model::{
    load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelParams, Padding, Pooling,
};
use crate::numerics::{derive_seed, Activation, Rng};
use crate::training::{
    csv_err, csv_writer, evaluate, fmt_real, holdout_split, sweep, train, AxisValue, ChannelSource,
    EpochRecord, EvalReport, OptimizerKind, Protocol, SweepAxis, TrainConfig,
};
use crate::transfer::{
    adapt_vocabulary, direct_from, incremental_from, HeadPolicy, MergePolicy, TransferMode,
    TransferPlan,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const DEFAULT_SEED: u64 = 42;
const DEFAULT_BINS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Baseline,
    Optimal,
}

#[derive(Debug, Parser)]
#[command(name = "attncnn", version, about = "Attention CNN sentence classifier")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Exact run directory, instead of a timestamped one under --out.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and evaluate it on a test split.
    Train(TrainCmd),
    /// Evaluate a checkpoint on a labeled dataset.
    Evaluate(EvaluateCmd),
    /// Apply a trained model to a target domain.
    Transfer(TransferCmd),
    /// Export per-word attention distributions.
    Explain(ExplainCmd),
    /// Vary one hyperparameter and report accuracy per value.
    Sweep(SweepCmd),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Transfer(_) => "transfer",
            Command::Explain(_) => "explain",
            Command::Sweep(_) => "sweep",
        }
    }
}

#[derive(Debug, Default, Args)]
pub struct DataFlags {
    /// Training data (`label<TAB>text` per line).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Test data. Without it a holdout split is taken from the training data.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub s_max: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct ModelFlags {
    /// Region sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub regions: Option<Vec<usize>>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub attn_dim: Option<usize>,
    #[arg(long)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub padding: Option<Padding>,
    #[arg(long)]
    pub pooling: Option<Pooling>,
    #[arg(long)]
    pub embedding: Option<EmbeddingVariant>,
    /// Pretrained vector file; repeat for multi-channel variants.
    #[arg(long = "vectors")]
    pub vectors: Vec<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Use k-fold cross-validation with this many folds.
    #[arg(long, conflicts_with = "holdout")]
    pub kfold: Option<usize>,
    /// Use a holdout split with this test fraction.
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateCmd {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Vocabulary file the data was prepared with, checked against the
    /// checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Extend the checkpoint vocabulary with the dataset's tokens.
    #[arg(long)]
    pub adapt: bool,
}

#[derive(Debug, Args)]
pub struct TransferCmd {
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target_train: Option<PathBuf>,
    #[arg(long)]
    pub target_test: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub mode: Option<TransferMode>,
    #[arg(long)]
    pub head: Option<HeadPolicy>,
    #[arg(long)]
    pub merge: Option<MergePolicy>,
    /// Run direct and incremental transfer and write a comparison table.
    #[arg(long)]
    pub both: bool,
    /// Dropout during fine-tuning.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ExplainCmd {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Words to report, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub words: Option<Vec<String>>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub format: Option<ExportFormat>,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[arg(long)]
    pub axis: Option<SweepAxis>,
    /// Values along the axis, comma separated; region-size tuples as
    /// `(3,4,5),(4,5,6)`.
    #[arg(long)]
    pub values: Option<String>,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelSection,
    pub embeddings: EmbeddingSection,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
    pub transfer: TransferSection,
    pub explain: ExplainSection,
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub classes: Option<usize>,
    pub s_max: Option<usize>,
    pub min_count: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub region_sizes: Option<Vec<usize>>,
    pub filters: Option<usize>,
    pub attn_dim: Option<usize>,
    pub activation: Option<Activation>,
    pub dropout: Option<f64>,
    pub padding: Option<Padding>,
    pub pooling: Option<Pooling>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub variant: Option<EmbeddingVariant>,
    pub paths: Vec<PathBuf>,
    pub dim: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub adadelta_rho: Option<f64>,
    pub adadelta_eps: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub repeats: Option<usize>,
    pub protocol: Option<Protocol>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub classes: Option<usize>,
    pub adapt: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub source: Option<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
    pub classes: Option<usize>,
    pub mode: Option<TransferMode>,
    pub head: Option<HeadPolicy>,
    pub merge: Option<MergePolicy>,
    pub both: Option<bool>,
    pub dropout: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub words: Option<Vec<String>>,
    pub bins: Option<usize>,
    pub format: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub axis: Option<String>,
    pub values: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Failure::usage(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::usage(e.to_string().trim_end().to_string()))
    }
}

/// A failed command: what to print and which exit code to return.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            kind: "runtime",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure {
                code: EXIT_USAGE,
                kind: "config",
                message: e.to_string(),
            },
            _ => Failure {
                code: EXIT_RUNTIME,
                kind: error_kind(&e),
                message: e.to_string(),
            },
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Parse { .. } => "parse",
        Error::LabelOutOfRange { .. } => "label",
        Error::EmptyCorpus => "empty_corpus",
        Error::UnknownWord(_) => "unknown_word",
        Error::CheckpointVersion { .. }
        | Error::CheckpointDigestMissing
        | Error::CheckpointShape(_)
        | Error::CheckpointParse(_) => "checkpoint",
        Error::ClassCountMismatch { .. } => "class_count",
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

/// Parses the process arguments and runs the command.
pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Runs the command line given by `args` (program name first) and returns
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    let command = cli.command.name();
    let mut run_dir = None;
    match execute(&cli, &mut run_dir) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message.replace('\n', " "));
            if let Some(dir) = &run_dir {
                write_error_log(dir, command, &f);
            }
            f.code
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();
}

fn write_error_log(dir: &Path, command: &str, f: &Failure) {
    let body = serde_json::json!({
        "command": command,
        "kind": f.kind,
        "exit_code": f.code,
        "message": f.message,
    });
    let _ = fs::write(dir.join("error.json"), format!("{body}\n"));
}

/// Settings shared by every command after merging flags, file and preset.
struct Context<'a> {
    cli: &'a Cli,
    config: RunConfig,
    seed: u64,
}

fn execute(cli: &Cli, run_dir: &mut Option<PathBuf>) -> CmdResult {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let ctx = Context { cli, config, seed };
    match &cli.command {
        Command::Train(cmd) => cmd_train(&ctx, cmd, run_dir),
        Command::Evaluate(cmd) => cmd_evaluate(&ctx, cmd, run_dir),
        Command::Transfer(cmd) => cmd_transfer(&ctx, cmd, run_dir),
        Command::Explain(cmd) => cmd_explain(&ctx, cmd, run_dir),
        Command::Sweep(cmd) => cmd_sweep(&ctx, cmd, run_dir),
    }
}

impl Context<'_> {
    fn preset(&self) -> Preset {
        self.cli
            .preset
            .or(self.config.preset)
            .unwrap_or(Preset::Optimal)
    }

    /// Creates the run directory for `command` and records it in `slot`.
    fn open_run_dir(&self, command: &str, slot: &mut Option<PathBuf>) -> CmdResult<PathBuf> {
        let dir = match &self.cli.run_dir {
            Some(dir) => dir.clone(),
            None => {
                let parent = self
                    .cli
                    .out
                    .clone()
                    .or_else(|| self.config.out.clone())
                    .unwrap_or_else(|| PathBuf::from("runs"));
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = parent.join(format!("{stamp}-seed{}-{command}", self.seed));
                let mut dir = base.clone();
                let mut n = 1;
                while dir.exists() {
                    n += 1;
                    dir = PathBuf::from(format!("{}-{n}", base.display()));
                }
                dir
            }
        };
        fs::create_dir_all(&dir)
            .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
        *slot = Some(dir.clone());
        Ok(dir)
    }

    fn train_config(&self, flags: &TrainFlags) -> CmdResult<TrainConfig> {
        let sec = &self.config.train;
        let mut t = TrainConfig {
            seed: self.seed,
            ..TrainConfig::default()
        };
        t.optimizer = flags.optimizer.or(sec.optimizer).unwrap_or(t.optimizer);
        t.learning_rate = flags.lr.or(sec.learning_rate).unwrap_or(t.learning_rate);
        t.adadelta_rho = sec.adadelta_rho.unwrap_or(t.adadelta_rho);
        t.adadelta_eps = sec.adadelta_eps.unwrap_or(t.adadelta_eps);
        t.batch_size = flags.batch_size.or(sec.batch_size).unwrap_or(t.batch_size);
        t.epochs = flags.epochs.or(sec.epochs).unwrap_or(t.epochs);
        t.repeats = flags.repeats.or(sec.repeats).unwrap_or(t.repeats);
        t.protocol = match (flags.kfold, flags.holdout) {
            (Some(k), _) => Protocol::Kfold { k },
            (None, Some(fraction)) => Protocol::Holdout { fraction },
            _ => sec.protocol.unwrap_or(t.protocol),
        };
        t.validate()?;
        Ok(t)
    }

    /// Model configuration and embedding source for a dataset with `classes`
    /// labels and sentences of `s_max` slots.
    fn model_config(
        &self,
        flags: &ModelFlags,
        classes: usize,
        s_max: usize,
    ) -> CmdResult<(ModelConfig, ChannelSource)> {
        let sec = &self.config.model;
        let emb = &self.config.embeddings;
        let (variant_default, base) = match self.preset() {
            Preset::Baseline => (
                EmbeddingVariant::Random,
                ModelConfig::baseline as fn(_, _, _, _) -> _,
            ),
            Preset::Optimal => (
                EmbeddingVariant::FourChannel,
                ModelConfig::optimal as fn(_, _, _, _) -> _,
            ),
        };
        let variant = flags.embedding.or(emb.variant).unwrap_or(variant_default);
        let dim = flags.dim.or(emb.dim).unwrap_or(DEFAULT_EMBED_DIM);
        let paths = if flags.vectors.is_empty() {
            emb.paths.clone()
        } else {
            flags.vectors.clone()
        };
        if paths.len() < variant.pretrained_count() {
            return Err(Failure::usage(format!(
                "embedding variant {variant} needs {} pretrained vector file(s) (--vectors), got {}",
                variant.pretrained_count(),
                paths.len()
            )));
        }
        for p in &paths {
            require_file(p, "vector file")?;
        }
        let mut cfg: ModelConfig = base(dim, variant.channel_count(), classes, s_max);
        if let Some(r) = flags.regions.clone().or_else(|| sec.region_sizes.clone()) {
            cfg.region_sizes = r;
        }
        cfg.filters = flags.filters.or(sec.filters).unwrap_or(cfg.filters);
        cfg.attn_dim = flags.attn_dim.or(sec.attn_dim).or(cfg.attn_dim);
        cfg.activation = flags
            .activation
            .or(sec.activation)
            .unwrap_or(cfg.activation);
        cfg.dropout = flags.dropout.or(sec.dropout).unwrap_or(cfg.dropout);
        cfg.padding = flags.padding.or(sec.padding).unwrap_or(cfg.padding);
        cfg.pooling = flags.pooling.or(sec.pooling).unwrap_or(cfg.pooling);
        cfg.validate()?;
        Ok((
            cfg,
            ChannelSource {
                variant,
                paths,
                embed_dim: dim,
            },
        ))
    }

    fn data_settings(&self, flags: &DataFlags) -> DataSection {
        let sec = &self.config.data;
        DataSection {
            train: flags.train.clone().or_else(|| sec.train.clone()),
            test: flags.test.clone().or_else(|| sec.test.clone()),
            classes: flags.classes.or(sec.classes),
            s_max: flags.s_max.or(sec.s_max),
            min_count: flags.min_count.or(sec.min_count),
        }
    }
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn required(value: Option<PathBuf>, flag: &str, what: &str) -> CmdResult<PathBuf> {
    let path = value.ok_or_else(|| Failure::usage(format!("missing {what} (--{flag})")))?;
    require_file(&path, what)?;
    Ok(path)
}

/// Reads a dataset whose class count may be unknown. Labels must then
/// start at zero; the count is one more than the largest label.
fn read_labeled(path: &Path, classes: Option<usize>) -> CmdResult<(Vec<LabeledSentence>, usize)> {
    let sentences = read_tsv(path, classes.unwrap_or(usize::MAX))?;
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let classes =
        classes.unwrap_or_else(|| sentences.iter().map(|s| s.label).max().unwrap_or(0) + 1);
    Ok((sentences, classes.max(2)))
}

fn write_vocab(path: &Path, vocab: &Vocabulary) -> CmdResult {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn read_vocab(path: &Path) -> CmdResult<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Vocabulary::from_tokens(
        text.lines().map(str::to_string).collect(),
    )?)
}

fn write_history(path: &Path, history: &[EpochRecord]) -> CmdResult {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "train_loss", "val_accuracy"])
        .map_err(|e| csv_err(path, e))?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            fmt_real(h.train_loss),
            h.val_accuracy.map_or(String::new(), fmt_real),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn print_report(title: &str, report: &EvalReport) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{}", report.to_text());
}

mod tag {
    pub const SPLIT: u64 = 0x20;
    pub const INIT: u64 = 0x21;
    pub const TRAIN: u64 = 0x22;
    pub const ADAPT: u64 = 0x23;
}

fn cmd_train(ctx: &Context, cmd: &TrainCmd, slot: &mut Option<PathBuf>) -> CmdResult {
    let data = ctx.data_settings(&cmd.data);
    let train_path = required(data.train.clone(), "train", "training data")?;
    if let Some(test) = &data.test {
        require_file(test, "test data")?;
    }
    let tcfg = ctx.train_config(&cmd.train)?;
    let (sentences, classes) = read_labeled(&train_path, data.classes)?;
    let vocab = Arc::new(build_vocab(&sentences, data.min_count.unwrap_or(1))?);
    let s_max = data.s_max.unwrap_or_else(|| default_s_max(&sentences));
    let (cfg, source) = ctx.model_config(&cmd.model, classes, s_max)?;

    let (train_sents, test_sents, split_made) = match &data.test {
        Some(test) => (sentences, read_tsv(test, classes)?, false),
        None => {
            let fraction = match tcfg.protocol {
                Protocol::Holdout { fraction } => fraction,
                Protocol::Kfold { k } => 1.0 / k as f64,
            };
            let mut rng = Rng::new(derive_seed(ctx.seed, tag::SPLIT));
            let (tr, te) = holdout_split(sentences.len(), fraction, &mut rng)?;
            let pick = |idx: &[usize]| {
                idx.iter()
                    .map(|&i| sentences[i].clone())
                    .collect::<Vec<_>>()
            };
            (pick(&tr), pick(&te), true)
        }
    };
    let train_set = Dataset::encode(&train_sents, Arc::clone(&vocab), s_max, classes)?;
    let test_set = Dataset::encode(&test_sents, Arc::clone(&vocab), s_max, classes)?;

    let dir = ctx.open_run_dir("train", slot)?;
    write_json(
        &dir.join("run.json"),
        &serde_json::json!({
            "command": "train",
            "seed": ctx.seed,
            "model": &cfg,
            "train": &tcfg,
            "embedding": source.variant,
            "vectors": &source.paths,
        }),
    )?;
    let mut channels = source.build(&vocab, ctx.seed)?;
    let mut params = ModelParams::init(&cfg, &mut Rng::new(derive_seed(ctx.seed, tag::INIT)))?;
    let mut rng = Rng::new(derive_seed(ctx.seed, tag::TRAIN));
    log::info!("training {cfg} on {} sentences", train_set.len());
    let outcome = train(
        &train_set,
        &mut channels,
        &mut params,
        &cfg,
        &tcfg,
        &mut rng,
        Some(&test_set),
    )?;
    let report = evaluate(&test_set, &channels, &params, &cfg)?;

    let ckpt = Checkpoint {
        config: cfg,
        params,
        vocab: (*vocab).clone(),
        channels,
    };
    save_checkpoint(dir.join("model.ckpt"), &ckpt)?;
    write_vocab(&dir.join("vocab.txt"), &vocab)?;
    write_history(&dir.join("history.csv"), &outcome.history)?;
    report.write_csv(&dir.join("report.csv"))?;
    if split_made {
        write_tsv(dir.join("test_split.tsv"), &test_sents)?;
        write_tsv(dir.join("train_split.tsv"), &train_sents)?;
    }
    print_report(&format!("run directory: {}", dir.display()), &report);
    Ok(())
}

fn cmd_evaluate(ctx: &Context, cmd: &EvaluateCmd, slot: &mut Option<PathBuf>) -> CmdResult {
    let sec = &ctx.config.evaluate;
    let ckpt_path = required(
        cmd.checkpoint.clone().or_else(|| sec.checkpoint.clone()),
        "checkpoint",
        "checkpoint",
    )?;
    let data_path = required(
        cmd.data.clone().or_else(|| sec.data.clone()),
        "data",
        "dataset",
    )?;
    let vocab_path = cmd.vocab.clone().or_else(|| sec.vocab.clone());
    if let Some(p) = &vocab_path {
        require_file(p, "vocabulary file")?;
    }
    let adapt = cmd.adapt || sec.adapt.unwrap_or(false);
    let classes = cmd.classes.or(sec.classes);

    let mut ckpt = load_checkpoint(&ckpt_path)?;
    let dir = ctx.open_run_dir("evaluate", slot)?;
    if let Some(c) = classes {
        if c != ckpt.config.classes {
            return Err(Error::ClassCountMismatch {
                source_classes: ckpt.config.classes,
                target_classes: c,
            }
            .into());
        }
    }
    let sentences = read_tsv(&data_path, ckpt.config.classes)?;
    if let Some(p) = &vocab_path {
        if let Some(mismatch) = ckpt.check_vocab(&read_vocab(p)?) {
            eprintln!("warning: {mismatch}");
            if !adapt {
                return Err(Failure::runtime(format!(
                    "{mismatch}; rerun with --adapt to merge the dataset vocabulary"
                )));
            }
        }
    }
    if adapt {
        let mut rng = Rng::new(derive_seed(ctx.seed, tag::ADAPT));
        let before = ckpt.vocab.len();
        ckpt = adapt_vocabulary(&ckpt, &sentences, &mut rng)?;
        log::info!(
            "vocabulary adapted: {} new tokens",
            ckpt.vocab.len() - before
        );
    }
    let dataset = Dataset::encode(
        &sentences,
        Arc::new(ckpt.vocab.clone()),
        ckpt.config.s_max,
        ckpt.config.classes,
    )?;
    let report = evaluate(&dataset, &ckpt.channels, &ckpt.params, &ckpt.config)?;
    report.write_csv(&dir.join("report.csv"))?;
    print_report(&format!("run directory: {}", dir.display()), &report);
    Ok(())
}

fn cmd_transfer(ctx: &Context, cmd: &TransferCmd, slot: &mut Option<PathBuf>) -> CmdResult {
    let sec = &ctx.config.transfer;
    let source = required(
        cmd.source.clone().or_else(|| sec.source.clone()),
        "source",
        "source checkpoint",
    )?;
    let test_path = required(
        cmd.target_test.clone().or_else(|| sec.target_test.clone()),
        "target-test",
        "target test data",
    )?;
    let both = cmd.both || sec.both.unwrap_or(false);
    let mode = cmd.mode.or(sec.mode).unwrap_or(TransferMode::Incremental);
    let train_path = cmd
        .target_train
        .clone()
        .or_else(|| sec.target_train.clone());
    let needs_train = both || mode == TransferMode::Incremental;
    let train_path = match train_path {
        Some(p) => {
            require_file(&p, "target training data")?;
            Some(p)
        }
        None if needs_train => {
            return Err(Failure::usage(
                "missing target training data (--target-train)",
            ));
        }
        None => None,
    };
    let finetune = ctx.train_config(&cmd.train)?;
    let ckpt = load_checkpoint(&source)?;
    let classes = cmd.classes.or(sec.classes).unwrap_or(ckpt.config.classes);
    let target_test = read_tsv(&test_path, classes)?;
    let target_train = match &train_path {
        Some(p) => read_tsv(p, classes)?,
        None => Vec::new(),
    };
    let plan = TransferPlan {
        source,
        target_train,
        target_test,
        target_classes: classes,
        mode,
        head: cmd.head.or(sec.head).unwrap_or_default(),
        finetune,
        dropout: cmd.dropout.or(sec.dropout),
        merge: cmd.merge.or(sec.merge).unwrap_or_default(),
    };
    let dir = ctx.open_run_dir("transfer", slot)?;

    let modes: &[TransferMode] = if both {
        &[TransferMode::Direct, TransferMode::Incremental]
    } else {
        std::slice::from_ref(&plan.mode)
    };
    let mut rows = Vec::new();
    for &m in modes {
        let report = match m {
            TransferMode::Direct => direct_from(&ckpt, &plan)?,
            TransferMode::Incremental => {
                let outcome = incremental_from(&ckpt, &plan)?;
                save_checkpoint(dir.join("transferred.ckpt"), &outcome.checkpoint)?;
                write_history(&dir.join("history.csv"), &outcome.history)?;
                outcome.report
            }
        };
        report.write_csv(&dir.join(format!("{m}_report.csv")))?;
        print_report(&format!("{m} transfer"), &report);
        rows.push((m, report));
    }
    if both {
        let path = dir.join("comparison.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["mode", "accuracy", "correct", "total", "loss"])
            .map_err(|e| csv_err(&path, e))?;
        for (m, r) in &rows {
            w.write_record([
                m.to_string(),
                fmt_real(r.accuracy),
                r.correct.to_string(),
                r.total.to_string(),
                fmt_real(r.loss),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

/// File-name-safe rendering of a word.
fn file_stem(word: &str) -> String {
    word.chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn cmd_explain(ctx: &Context, cmd: &ExplainCmd, slot: &mut Option<PathBuf>) -> CmdResult {
    let sec = &ctx.config.explain;
    let ckpt_path = required(
        cmd.checkpoint.clone().or_else(|| sec.checkpoint.clone()),
        "checkpoint",
        "checkpoint",
    )?;
    let data_path = required(
        cmd.data.clone().or_else(|| sec.data.clone()),
        "data",
        "dataset",
    )?;
    let words = cmd
        .words
        .clone()
        .or_else(|| sec.words.clone())
        .filter(|w| !w.is_empty())
        .ok_or_else(|| Failure::usage("missing word list (--words)"))?;
    let bins = cmd.bins.or(sec.bins).unwrap_or(DEFAULT_BINS);
    let format = match (cmd.format, &sec.format) {
        (Some(f), _) => f,
        (None, Some(s)) => s.parse()?,
        (None, None) => ExportFormat::Csv,
    };
    if bins < 2 {
        return Err(Failure::usage(format!("need at least 2 bins, got {bins}")));
    }

    let ckpt = load_checkpoint(&ckpt_path)?;
    let sentences = read_tsv(&data_path, ckpt.config.classes)?;
    let dataset = Dataset::encode(
        &sentences,
        Arc::new(ckpt.vocab.clone()),
        ckpt.config.s_max,
        ckpt.config.classes,
    )?;
    let dir = ctx.open_run_dir("explain", slot)?;

    let summary_path = dir.join("summary.csv");
    let mut summary = csv_writer(&summary_path)?;
    let mut header = vec![
        "word".to_string(),
        "observations".into(),
        "mean_score".into(),
    ];
    header.extend((0..ckpt.config.classes).map(|c| format!("mean_label_{c}")));
    summary
        .write_record(&header)
        .map_err(|e| csv_err(&summary_path, e))?;
    let mut failures = Vec::new();
    for word in &words {
        let report = match word_distribution(
            &ckpt.params,
            &ckpt.config,
            &ckpt.channels,
            &dataset,
            word,
            bins,
        ) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: {word}: {e}");
                failures.push(word.clone());
                continue;
            }
        };
        let path = dir.join(format!(
            "weights_{}.{}",
            file_stem(&report.word),
            format.extension()
        ));
        export_report(&report, &path, format)?;
        let mut row = vec![
            report.word.clone(),
            report.observations.len().to_string(),
            report.mean_score().map_or(String::new(), fmt_real),
        ];
        row.extend(
            report
                .mean_by_label()
                .into_iter()
                .map(|m| m.map_or(String::new(), fmt_real)),
        );
        summary
            .write_record(&row)
            .map_err(|e| csv_err(&summary_path, e))?;
        println!(
            "{}: {} observation(s) -> {}",
            report.word,
            report.observations.len(),
            path.display()
        );
    }
    summary.flush().map_err(|e| Error::io(&summary_path, e))?;
    if failures.len() == words.len() {
        return Err(Failure::runtime(format!(
            "no word could be reported ({})",
            failures.join(", ")
        )));
    }
    Ok(())
}

fn cmd_sweep(ctx: &Context, cmd: &SweepCmd, slot: &mut Option<PathBuf>) -> CmdResult {
    let sec = &ctx.config.sweep;
    let axis = match (cmd.axis, &sec.axis) {
        (Some(a), _) => a,
        (None, Some(s)) => s
            .parse::<SweepAxis>()
            .map_err(|e| Failure::usage(e.to_string()))?,
        (None, None) => return Err(Failure::usage("missing sweep axis (--axis)")),
    };
    let text = cmd
        .values
        .clone()
        .or_else(|| sec.values.clone())
        .ok_or_else(|| Failure::usage("missing sweep values (--values)"))?;
    let values: Vec<AxisValue> = axis.parse_values(&text)?;

    let data = ctx.data_settings(&cmd.data);
    let train_path = required(data.train.clone(), "train", "training data")?;
    let tcfg = ctx.train_config(&cmd.train)?;
    let (sentences, classes) = read_labeled(&train_path, data.classes)?;
    let vocab = Arc::new(build_vocab(&sentences, data.min_count.unwrap_or(1))?);
    let s_max = data.s_max.unwrap_or_else(|| default_s_max(&sentences));
    let dataset = Dataset::encode(&sentences, vocab, s_max, classes)?;

    let mut model_flags = cmd.model.clone();
    if axis == SweepAxis::Embedding {
        // every variant is validated per value; the base only needs to be
        // buildable without vector files
        model_flags.embedding = Some(EmbeddingVariant::Random);
    }
    let (base, source) = ctx.model_config(&model_flags, classes, s_max)?;
    let mut source = source;
    if axis == SweepAxis::Embedding {
        source.paths = cmd.model.vectors.clone();
        if source.paths.is_empty() {
            source.paths.clone_from(&ctx.config.embeddings.paths);
        }
        for v in &values {
            if let AxisValue::Embedding(variant) = v {
                if source.paths.len() < variant.pretrained_count() {
                    return Err(Failure::usage(format!(
                        "embedding variant {variant} needs {} pretrained vector file(s)",
                        variant.pretrained_count()
                    )));
                }
            }
        }
    }

    let dir = ctx.open_run_dir("sweep", slot)?;
    write_json(
        &dir.join("run.json"),
        &serde_json::json!({
            "command": "sweep",
            "seed": ctx.seed,
            "axis": axis.name(),
            "values": values.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "model": &base,
            "train": &tcfg,
        }),
    )?;
    let table = sweep(&dataset, &source, &base, &tcfg, axis, &values)?;
    table.write_csv(&dir.join("sweep.csv"))?;
    print!("{}", table.to_text());
    println!("run directory: {}", dir.display());
    Ok(())
}
