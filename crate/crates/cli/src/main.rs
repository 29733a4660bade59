//! `baa` — bone age assessment experiment pipeline.
//!
//! Subcommands mirror the workflow: dataset stats, synthetic data, split
//! generation, training, evaluation, and cross-run comparison.
//!
//! Exit codes: 0 on success, 2 on input/config errors, 3 on numerical
//! divergence during training.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use baa_core::data::SplitSpec;
use baa_core::engine::TrainError;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "baa", version, about = "Bone age assessment experiment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute dataset statistics, distribution plots, and a bias report.
    Stats(StatsArgs),
    /// Generate a synthetic brightness-coded dataset.
    Synth(SynthArgs),
    /// Produce a deterministic train/val/test split as JSON.
    Split(SplitArgs),
    /// Train a regression model under a transfer regime.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out test split.
    Evaluate(EvaluateArgs),
    /// Render the MAE comparison table from finished runs.
    Compare(CompareArgs),
}

#[derive(Args)]
struct StatsArgs {
    /// Manifest CSV with header `id,boneage,male`.
    #[arg(long)]
    csv: PathBuf,
    /// Directory of `<id>.png` images.
    #[arg(long)]
    images: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "stats")]
    out: PathBuf,
    /// Verify that every referenced image exists.
    #[arg(long)]
    strict: bool,
    /// Histogram bin width in months.
    #[arg(long, default_value_t = 12)]
    bin_width: u32,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the generated dataset.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples to generate.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 6000)]
    train: usize,
    #[arg(long, default_value_t = 2000)]
    val: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON path.
    #[arg(long, default_value = "split.json")]
    out: PathBuf,
    #[arg(long)]
    strict: bool,
}

/// Flags shared by train and evaluate; every flag has a config-file
/// equivalent, and flags win on conflict.
#[derive(Args, Default)]
struct CommonRunFlags {
    /// JSON run-config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<String>,
    /// Transfer regime: `full` retrains everything, `frozen` trains only the head.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_delta: Option<f64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    /// Pretrained-weight cache; defaults to $BAA_WEIGHTS_DIR.
    #[arg(long)]
    weights_dir: Option<PathBuf>,
    #[arg(long)]
    strict: Option<bool>,
}

impl CommonRunFlags {
    fn as_config(&self) -> RunConfig {
        RunConfig {
            csv: self.csv.clone(),
            images: self.images.clone(),
            out: self.out.clone(),
            backbone: self.backbone.clone(),
            regime: self.regime.clone(),
            strict: self.strict,
            epochs: self.epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            min_delta: self.min_delta,
            train_size: self.train_size,
            val_size: self.val_size,
            test_size: self.test_size,
            dropout_rate: self.dropout_rate,
            weights_dir: self.weights_dir.clone(),
            ..RunConfig::default()
        }
    }

    /// File config (when given) overlaid with these flags.
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        Ok(base.overlay(self.as_config()))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonRunFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint blob written by `train` (sidecar JSON expected next to it).
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: CommonRunFlags,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories containing `metrics.json`.
    #[arg(required = true)]
    run_dirs: Vec<PathBuf>,
    /// Output directory for `comparison.md` and `comparison.json`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats(args) => commands::cmd_stats(
            &args.csv,
            &args.images,
            &args.out,
            args.strict,
            args.bin_width,
        ),
        Command::Synth(args) => commands::cmd_synth(&args.out, args.n, args.seed),
        Command::Split(args) => commands::cmd_split(
            &args.csv,
            &args.images,
            SplitSpec {
                train: args.train,
                val: args.val,
                test: args.test,
            },
            args.seed,
            &args.out,
            args.strict,
        ),
        Command::Train(args) => commands::cmd_train(&args.common.resolve()?),
        Command::Evaluate(args) => {
            let out = args.common.out.clone();
            commands::cmd_evaluate(&args.checkpoint, &args.common.resolve()?, out.as_deref())
        }
        Command::Compare(args) => commands::cmd_compare(&args.run_dirs, &args.out),
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if matches!(
            cause.downcast_ref::<TrainError>(),
            Some(TrainError::NonFiniteLoss { .. })
        ) {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
