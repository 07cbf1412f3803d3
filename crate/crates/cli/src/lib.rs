//! `semgan` command-line driver: dataset generation, the four training
//! stages, evaluation and the incremental-label experiment.
//!
//! Exit codes: 0 success, 2 validation, 3 stage order, 4 data integrity.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;

pub use config::{RunConfig, OUTPUT_ROOT_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_STAGE_ORDER: i32 = 3;
pub const EXIT_DATA_INTEGRITY: i32 = 4;

/// Repository version recorded in every run directory.
pub fn version_string() -> String {
    format!("semgan {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] semgan::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(semgan::Error::StageOrder { .. } | semgan::Error::Contract(_)) => EXIT_STAGE_ORDER,
            CliError::Core(semgan::Error::DataIntegrity(_)) => EXIT_DATA_INTEGRITY,
            _ => EXIT_VALIDATION,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "semgan", version, about = "Semantically constrained sim-to-real image translation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root (overrides the config file and SEMGAN_OUTPUT_ROOT).
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Run directory name under the output root; defaults to the subcommand.
    #[arg(long, global = true)]
    pub run_name: Option<String>,
    /// Base RNG seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Skip the stage if its completion marker matches this invocation.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural dataset.
    Gen(GenArgs),
    /// Train the initial detector on the labeled source domain.
    Pretrain(PretrainArgs),
    /// Embed target knowledge into a detector, or fine-tune on translated images.
    Finetune(FinetuneArgs),
    /// Train the translation networks under a frozen detector.
    TrainGan(TrainGanArgs),
    /// Translate a labeled source dataset with a trained generator.
    Translate(TranslateArgs),
    /// Evaluate a detector checkpoint on a labeled test set.
    Eval(EvalArgs),
    /// Run the incremental-label experiment.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Toy domain style: synthetic, day_like or night_like.
    #[arg(long, default_value = "synthetic")]
    pub style: String,
    /// Number of images to render.
    #[arg(long)]
    pub count: usize,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Image side in pixels (overrides the config file).
    #[arg(long)]
    pub canvas_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Labeled source dataset (defaults to the config's data.source).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Training steps (overrides the config file).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum FinetuneStage {
    /// Fine-tune T^A on `k` labeled target images (split a/b by schedule).
    Embed,
    /// Fine-tune a detector on translated images.
    Generated,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long, value_enum, default_value = "embed")]
    pub stage: FinetuneStage,
    /// Parent detector checkpoint.
    #[arg(long)]
    pub detector: PathBuf,
    /// Labeled target pool (embed stage).
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    /// Number of labeled target images to use (embed stage).
    #[arg(long)]
    pub k: Option<usize>,
    /// Translated dataset (generated stage).
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Real labeled validation images (generated stage); omitted holds out 20% of the generated set.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Training steps (overrides the config file).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainGanArgs {
    /// Frozen task detector checkpoint.
    #[arg(long)]
    pub detector: PathBuf,
    /// Labeled source dataset to translate from.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Unlabeled target-domain dataset.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Training steps (overrides the config file).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Task-loss weight; 0 trains a plain CycleGAN.
    #[arg(long)]
    pub lambda_t: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Source-to-target generator checkpoint.
    #[arg(long)]
    pub generator: PathBuf,
    /// Labeled source dataset.
    #[arg(long)]
    pub source: PathBuf,
    /// Output dataset directory; defaults to translated/ in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detector checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled test dataset.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Confidence threshold before NMS.
    #[arg(long)]
    pub conf_threshold: Option<f64>,
    /// IoU above which NMS suppresses a box.
    #[arg(long)]
    pub nms_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Comma-separated labeled-target budgets; defaults to 2,5,9,14,19,30,40,50.
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    /// Comma-separated subset of pretrained,cyclegan,fine_tuned,semgan_fine_tuned.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Comma-separated experiment seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Seeds run concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Labeled source dataset.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Unlabeled target-domain dataset.
    #[arg(long)]
    pub target_unlabeled: Option<PathBuf>,
    /// Labeled target pool the k images are drawn from.
    #[arg(long)]
    pub target_labeled: Option<PathBuf>,
    /// Labeled test dataset.
    #[arg(long)]
    pub test: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Usage errors exit with 2.
pub fn run_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
