//! `omrd`: train, evaluate, ablate and verify omni-directional
//! re-identification models.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 runtime abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use omrd_core::eval::Feature;

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    pub fn verify(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_VERIFY,
            message: msg.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: msg.into(),
        }
    }

    /// Library errors raised while running: a failed training run aborts,
    /// everything else is a problem with the inputs.
    pub fn from_core(e: omrd_core::Error) -> Self {
        use omrd_core::Error as E;
        match e {
            E::TrainingAborted { .. } | E::NonFinite { .. } => Self::runtime(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }

    /// Errors from reading user-supplied inputs.
    pub fn input(e: omrd_core::Error) -> Self {
        Self::usage(e.to_string())
    }
}

const AFTER_HELP: &str = "Exit codes: 0 success, 1 verification failure, 2 usage or configuration error, 3 runtime abort.\n\
Environment: OMRD_THREADS caps evaluation threads (default: all cores); results do not depend on it. \
RUST_LOG sets log verbosity (default: info).";

#[derive(Parser, Debug)]
#[command(name = "omrd", version, about = "Omni-directional GRU re-identification toolkit", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON run configuration.
    ///
    /// Writes checkpoint.omrd, train_log.csv and resolved_config.json
    /// into the configured output directory.
    #[command(after_help = AFTER_HELP)]
    Train(TrainArgs),
    /// Score a checkpoint on a dataset's query and gallery splits.
    ///
    /// Prints mAP and Rank-1/5/10 and writes eval_report_<feature>.json and
    /// cmc_<feature>.csv.
    #[command(after_help = AFTER_HELP)]
    Eval(EvalArgs),
    /// Train and score the four branch configurations with shared seeds.
    ///
    /// Writes ablation.csv with one row per configuration and descriptor.
    #[command(after_help = AFTER_HELP)]
    Ablate(TrainArgs),
    /// Check every analytic gradient against central differences in f64.
    #[command(after_help = AFTER_HELP)]
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset as PNG files plus manifest.json.
    #[command(after_help = AFTER_HELP)]
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run configuration: {dataset, model, train, output_dir}; omitted
    /// keys take their defaults.
    config: PathBuf,
    /// Override the configuration's output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `omrd train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory: a manifest.json written by `omrd synth`, or the
    /// bounding_box_train / query / bounding_box_test layout.
    #[arg(long)]
    dataset: PathBuf,
    /// Retrieval descriptor; defaults to the one recorded in the checkpoint.
    #[arg(long, value_parser = parse_feature)]
    feature: Option<Feature>,
    /// Longest rank of the reported CMC curve.
    #[arg(long, default_value_t = omrd_core::eval::DEFAULT_MAX_RANK)]
    max_rank: usize,
    /// Where to write the reports; defaults to the checkpoint's directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for the random test instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per elementary op.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Scale one op's backward pass by 1.01, to check that the suite
    /// notices (e.g. `sigmoid`).
    #[arg(long, value_name = "OP")]
    sabotage: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON generator parameters; omitted keys take their defaults and the
    /// flags below override the file.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    num_ids: Option<usize>,
    #[arg(long)]
    images_per_id: Option<usize>,
    /// Identities reserved for query and gallery.
    #[arg(long)]
    heldout_ids: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_feature(s: &str) -> Result<Feature, String> {
    s.parse::<Feature>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a.config, a.output_dir),
        Command::Eval(a) => commands::eval(&a.checkpoint, &a.dataset, a.feature, a.max_rank, a.output_dir),
        Command::Ablate(a) => commands::ablate(&a.config, a.output_dir),
        Command::Gradcheck(a) => commands::gradcheck(a.seed, a.instances, a.tolerance, a.step, a.sabotage.as_deref()),
        Command::Synth(a) => commands::synth(
            &a.out_dir,
            a.params.as_deref(),
            commands::SynthOverrides {
                num_ids: a.num_ids,
                images_per_id: a.images_per_id,
                heldout_ids: a.heldout_ids,
                seed: a.seed,
            },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
