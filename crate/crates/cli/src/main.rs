//! `prefill`: dataset construction, training, generation, evaluation and the
//! five-variant ablation, each as an independent subcommand.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "prefill", version, about = "Longitudinal chest X-ray findings pre-filling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pair consecutive visits into samples and write them with stats and splits.
    BuildDataset(BuildDatasetArgs),
    /// Train one model variant and write a checkpoint with its logs.
    Train(TrainArgs),
    /// Decode findings for one split with a trained run.
    Generate(GenerateArgs),
    /// Score generated findings against references.
    Evaluate(EvaluateArgs),
    /// Train and score all five variants; writes the ablation table.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Metadata CSV (patient_id, study_id, study_date, study_time, image_ids[, views]).
    #[arg(long, required_unless_present = "synthetic_patients", conflicts_with = "synthetic_patients")]
    pub metadata: Option<PathBuf>,
    /// Report store: a directory of `<study_id>.txt` files or a `study_id,report` CSV.
    #[arg(long, required_unless_present = "synthetic_patients")]
    pub reports: Option<PathBuf>,
    /// Split manifest CSV (patient_id, split).
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Split for patients absent from the manifest. Off unless given.
    #[arg(long)]
    pub fallback_split: Option<String>,
    /// Generate a synthetic corpus with this many patients instead of reading one.
    #[arg(long)]
    pub synthetic_patients: Option<usize>,
    /// Visit-count histogram of the synthetic corpus, `count:weight` pairs.
    #[arg(long, default_value = "1:0.2,2:0.3,3:0.3,4:0.2")]
    pub visits: String,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Side of the synthetic images in pixels.
    #[arg(long, default_value_t = 128)]
    pub image_side: u32,
    /// Drop malformed metadata rows and studies without reports instead of failing.
    #[arg(long)]
    pub skip_bad_rows: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single override, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_parser = ["baseline", "plus_image", "plus_report", "simple_fusion", "full"])]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Output directory of `build-dataset`.
    #[arg(long)]
    pub data: PathBuf,
    /// Image directory; defaults to `<data>/corpus/images`.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Vision backbone.
    #[arg(long, default_value = "stub")]
    pub backend: String,
    /// On-disk feature cache directory.
    #[arg(long)]
    pub feature_cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "train")]
    pub train_split: String,
    /// Split used for best-checkpoint selection; skipped when it has no samples.
    #[arg(long, default_value = "validation")]
    pub val_split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory of `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Beam width; greedy when omitted.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Maximum generated tokens; defaults to the model's target length.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSONL with `id`, `generated`, `reference` and optionally `previous`.
    #[arg(long)]
    pub input: PathBuf,
    /// Labeler rule table (JSON); the bundled rules when omitted.
    #[arg(long)]
    pub labeler_rules: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "train")]
    pub train_split: String,
    #[arg(long, default_value = "test")]
    pub eval_split: String,
    #[arg(long)]
    pub labeler_rules: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildDataset(a) => commands::build_dataset(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
