//! `dualprompt`: synthesize data, mask and split labels, train prompt
//! banks, evaluate them, export attention maps and run sweeps.
//!
//! Exit codes: 0 success, 2 validation error, 3 runtime failure.

mod commands;
mod config;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::CliResult;

#[derive(Parser)]
#[command(
    name = "dualprompt",
    version,
    about = "Dual positive/negative prompt learning for multi-label recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted class prototypes.
    Synth(SynthArgs),
    /// Hide labels, keeping a fixed fraction of known cells.
    Mask(MaskArgs),
    /// Split classes into seen and unseen sets.
    Split(SplitArgs),
    /// Train a prompt bank.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Export the spatial aggregation weights of one image and class.
    Attmap(AttmapArgs),
    /// Train and evaluate over a list of settings.
    Sweep(SweepArgs),
    /// Write the frozen encoder parameters of a config to a directory.
    DumpEncoders(DumpArgs),
}

#[derive(Args, serde::Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 2000)]
    pub images: usize,
    /// Region grid as HxW.
    #[arg(long, default_value = "8x8")]
    pub grid: String,
    #[arg(long, default_value_t = 1)]
    pub labels_min: usize,
    #[arg(long, default_value_t = 3)]
    pub labels_max: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Seed of the class prototypes; share it between train and test sets.
    #[arg(long)]
    pub catalog_seed: Option<u64>,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, serde::Serialize)]
pub struct MaskArgs {
    /// Fraction of label cells kept, in (0, 1].
    #[arg(long)]
    pub keep: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "in")]
    #[serde(skip)]
    pub input: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, serde::Serialize)]
pub struct SplitArgs {
    /// Comma-separated unseen class indices or names.
    #[arg(long)]
    pub unseen: String,
    #[arg(long = "in")]
    #[serde(skip)]
    pub input: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Partial,
    Zsl,
    Gzsl,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PromptModeArg {
    Shared,
    ClassSpecific,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    SoftmaxWeighted,
    Average,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ExecArg {
    Sequential,
    Deterministic,
    Parallel,
}

/// Flags that override the `train` section of the config.
#[derive(Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub prompt_mode: Option<PromptModeArg>,
    /// Context tokens for both polarities.
    #[arg(long)]
    pub n_ctx: Option<usize>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
    #[arg(long)]
    pub spatial_temp: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_enum)]
    pub exec: Option<ExecArg>,
    /// Leave wall-clock seconds out of the history.
    #[arg(long)]
    pub no_wall_time: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seen/unseen split file; unseen labels are ignored during training.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub out_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides the classifier and eval sections stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Comma-separated top-k values.
    #[arg(long)]
    pub topk: Option<String>,
    /// JSON report; a CSV row is appended next to it with extension `.csv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub exec: Option<ExecArg>,
}

#[derive(Args)]
pub struct AttmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub image_id: String,
    /// Class name or index.
    #[arg(long)]
    pub class: String,
    /// Output prefix; `.csv` and `.pgm` are appended.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
#[group(id = "swept", required = true, multiple = false, args = ["keep_list", "nctx_list"])]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fully labelled training data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub keep_list: Option<String>,
    #[arg(long)]
    pub nctx_list: Option<String>,
    /// Kept label fraction for context-length sweeps.
    #[arg(long, default_value_t = 1.0)]
    pub keep: f64,
    /// Runs per setting, with seeds `seed .. seed + repeat`.
    #[arg(long, default_value_t = 1)]
    pub repeat: u64,
    /// Results table; existing rows are kept and their settings skipped.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Mask(a) => commands::mask(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Attmap(a) => commands::attmap(a),
        Command::Sweep(a) => sweep::sweep(a),
        Command::DumpEncoders(a) => commands::dump_encoders(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
