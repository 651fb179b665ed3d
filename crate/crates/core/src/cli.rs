//! Command-line interface. `run` does all the work so it can be driven from tests.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::accounting::{build_report, REFERENCE_VOCAB};
use crate::data::{self, synthetic};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::model_io::SavedModel;
use crate::projection::{ProjectionConfig, Projector, DEFAULT_BITS, DEFAULT_MAX_NGRAM, DEFAULT_SKIP_DISTANCE};
use crate::trainer::{self, steps_for_epochs, TrainConfig, DEFAULT_EPOCHS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Paper warmup length; capped at a tenth of the run when no value is given.
const DEFAULT_WARMUP: usize = 10_000;

#[derive(Debug, Parser)]
#[command(
    name = "proformer",
    version,
    about = "Projection-based text classifier with local attention"
)]
pub struct Cli {
    /// Seed for projection hashing, initialization, shuffling and dropout.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a TSV file and write a model file.
    Train(TrainArgs),
    /// Print accuracy of a model on a labeled TSV file.
    Eval(EvalArgs),
    /// Classify one text per stdin line.
    Predict(PredictArgs),
    /// Print parameter, byte and multiply-accumulate counts for a configuration.
    Report(ReportArgs),
    /// Write a seeded synthetic TSV corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ArchArgs {
    /// Projection bits per token.
    #[arg(long = "T", visible_alias = "projection-bits", default_value_t = DEFAULT_BITS)]
    pub projection_bits: usize,
    /// Hidden size.
    #[arg(long = "d", visible_alias = "hidden", default_value_t = 768)]
    pub hidden: usize,
    /// Encoder layers.
    #[arg(long = "L", visible_alias = "layers", default_value_t = 2)]
    pub layers: usize,
    /// Attention heads.
    #[arg(long = "H", visible_alias = "heads", default_value_t = 12)]
    pub heads: usize,
    /// Tokens per local-attention group.
    #[arg(long = "K", visible_alias = "group-factor", default_value_t = 1)]
    pub group_factor: usize,
    /// Padded sequence length (must be a multiple of K).
    #[arg(long = "max-len", visible_alias = "N-max")]
    pub max_len: Option<usize>,
    /// Feed-forward width; defaults to the hidden size.
    #[arg(long = "ffn-dim")]
    pub ffn_dim: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long = "max-ngram", default_value_t = DEFAULT_MAX_NGRAM)]
    pub max_ngram: usize,
    #[arg(long = "skip-distance", default_value_t = DEFAULT_SKIP_DISTANCE)]
    pub skip_distance: usize,
}

impl ArchArgs {
    fn model_config(&self, classes: usize, max_len: usize) -> ModelConfig {
        ModelConfig {
            projection_bits: self.projection_bits,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            group_factor: self.group_factor,
            max_len,
            classes,
            ffn_dim: self.ffn_dim.unwrap_or(self.hidden),
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training TSV (`label<TAB>text`).
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out TSV scored at each metrics record.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Metrics NDJSON destination; stdout when absent.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long = "weight-decay", default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Defaults to min(10000, total_steps / 10).
    #[arg(long = "warmup-steps")]
    pub warmup_steps: Option<usize>,
    /// Defaults to epochs × batches per epoch.
    #[arg(long = "total-steps")]
    pub total_steps: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long = "batch-size", default_value_t = 256)]
    pub batch_size: usize,
    /// Defaults to one epoch.
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long = "clip-norm", default_value_t = 1.0)]
    pub clip_norm: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled TSV to score.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Sequence length for the compute counts; defaults to the padded length.
    #[arg(long = "N")]
    pub seq_len: Option<usize>,
    #[arg(long = "C", visible_alias = "classes", default_value_t = 21)]
    pub classes: usize,
    /// Vocabulary size of the embedding table used for comparison.
    #[arg(long = "V", visible_alias = "reference-vocab", default_value_t = REFERENCE_VOCAB)]
    pub reference_vocab: u64,
    /// Embedding width for the comparison; defaults to d.
    #[arg(long = "ref-d", visible_alias = "reference-dim")]
    pub reference_dim: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output TSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub examples: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
}

fn error_line(kind: &str, detail: &str) -> String {
    json!({ "error": kind, "detail": detail }).to_string()
}

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let detail = e.to_string();
                    let first = detail.lines().next().unwrap_or_default().trim_start_matches("error: ");
                    let _ = writeln!(stderr, "{}", error_line("usage", first));
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(&cli, stdin, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_line(e.kind(), &e.to_string()));
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: &Cli, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.seed, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Predict(a) => cmd_predict(a, stdin, stdout, stderr),
        Command::Report(a) => cmd_report(a, stdout),
        Command::Synth(a) => cmd_synth(a, cli.seed, stdout),
    }
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn cmd_train(a: &TrainArgs, seed: u64, stdout: &mut dyn Write) -> Result<()> {
    let ds = data::load_dataset(&a.train)?;
    let eval = a
        .eval
        .as_ref()
        .map(|p| data::load_dataset_with_labels(p, &ds.labels))
        .transpose()?;
    let max_len = a
        .arch
        .max_len
        .unwrap_or_else(|| data::default_max_len(&ds.examples, a.arch.group_factor.max(1)));
    let cfg = a.arch.model_config(ds.labels.len(), max_len);
    cfg.validate()?;
    let projection = ProjectionConfig::new(a.arch.projection_bits, a.arch.max_ngram, a.arch.skip_distance, seed)?;
    let projector = Projector::new(projection.clone());

    let per_epoch = steps_for_epochs(ds.examples.len(), a.batch_size, 1);
    let total_steps = a.total_steps.unwrap_or(per_epoch * a.epochs);
    let tc = TrainConfig {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        weight_decay: a.weight_decay,
        warmup_steps: a.warmup_steps.unwrap_or(DEFAULT_WARMUP.min(total_steps / 10)),
        total_steps,
        batch_size: a.batch_size,
        dropout: a.arch.dropout,
        eval_every: a.eval_every.unwrap_or(per_epoch.max(1)),
        seed,
        clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
    };
    let params = ModelParams::init(&cfg, seed)?;
    let outcome = match &a.metrics {
        Some(path) => {
            let f = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(f);
            trainer::train_with(
                params,
                &cfg,
                &projector,
                &ds.examples,
                eval.as_deref(),
                &tc,
                trainer::ndjson_sink(&mut w),
            )?
        }
        None => trainer::train_with(
            params,
            &cfg,
            &projector,
            &ds.examples,
            eval.as_deref(),
            &tc,
            trainer::ndjson_sink(stdout),
        )?,
    };
    SavedModel::new(cfg, projection, outcome.params, ds.labels)?.save(&a.model)
}

fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let model = SavedModel::load(&a.model)?;
    let examples = data::load_dataset_with_labels(&a.data, &model.labels)?;
    let accuracy = trainer::evaluate(&model.params, &model.config, &model.projector(), &examples)?;
    writeln!(
        stdout,
        "{}",
        json!({ "accuracy": accuracy, "examples": examples.len() })
    )
    .map_err(out_err)
}

fn cmd_predict(a: &PredictArgs, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let model = SavedModel::load(&a.model)?;
    let projector = model.projector();
    for (i, line) in stdin.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        let tokens = data::tokenize(&line);
        match trainer::predict(&model.params, &model.config, &projector, &tokens) {
            Ok((class, confidence)) => {
                writeln!(stdout, "{}\t{confidence:.6}", model.labels[class]).map_err(out_err)?;
            }
            Err(e) => {
                let record = json!({ "error": e.kind(), "detail": e.to_string(), "line": i + 1 });
                writeln!(stderr, "{record}").map_err(|e| Error::io("<stderr>", e))?;
            }
        }
    }
    stdout.flush().map_err(out_err)
}

fn cmd_report(a: &ReportArgs, stdout: &mut dyn Write) -> Result<()> {
    let k = a.arch.group_factor.max(1);
    let max_len = a
        .arch
        .max_len
        .or(a.seq_len.map(|n| n.div_ceil(k) * k))
        .unwrap_or(data::LONG_MAX_LEN.div_ceil(k) * k);
    let cfg = a.arch.model_config(a.classes, max_len);
    let seq_len = a.seq_len.unwrap_or(max_len);
    let report = build_report(
        &cfg,
        seq_len,
        a.reference_vocab,
        a.reference_dim.unwrap_or(a.arch.hidden as u64),
    )?;
    writeln!(stdout, "{}", serde_json::to_string(&report).expect("report serializes")).map_err(out_err)
}

fn cmd_synth(a: &SynthArgs, seed: u64, stdout: &mut dyn Write) -> Result<()> {
    if a.classes < 2 || a.examples == 0 {
        return Err(Error::InvalidConfig("need at least 2 classes and 1 example".into()));
    }
    let rows = synthetic::generate(a.examples, a.classes, seed);
    match &a.out {
        Some(path) => synthetic::write_tsv(path, &rows),
        None => stdout.write_all(synthetic::to_tsv(&rows).as_bytes()).map_err(out_err),
    }
}
