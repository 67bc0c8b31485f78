mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Synthetic persona data, contrastive fine-tuning and evaluation of a small
/// encoder-decoder offer generator.
#[derive(Debug, Parser)]
#[command(name = "offergen", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and split it into train/val/test JSONL files.
    GenData(GenDataArgs),
    /// Fine-tune a fresh model on a generated dataset.
    Train(TrainArgs),
    /// Generate one offer per test persona and judge it.
    Eval(EvalArgs),
    /// Evaluate two checkpoints on the same test set.
    Compare(CompareArgs),
    /// Spectral heavy-tail analysis of every weight matrix.
    Diagnose(DiagnoseArgs),
    /// Pearson chi-square test of independence on a 2x2 table.
    Chisq(ChisqArgs),
}

#[derive(Debug, Args)]
pub struct OutDir {
    /// Output directory. Falls back to $OFFERGEN_OUT, then ./offergen-out.
    #[arg(long, env = "OFFERGEN_OUT", default_value = "offergen-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of examples.
    #[arg(long, default_value_t = 25_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train/val/test fractions, summing to 1.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"])]
    pub split: Option<Vec<f64>>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Generation loss only (lambda = 0).
    Sft,
    /// Weighted contrastive plus generation loss.
    Contrastive,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train.jsonl and val.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Contrastive weight; must be 0 (or absent) in sft mode.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// InfoNCE temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Use the literal single-positive InfoNCE form.
    #[arg(long)]
    pub literal_infonce: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the weights of this epoch instead of the best validation loss.
    #[arg(long)]
    pub fixed_epoch: Option<usize>,
    /// Also write every epoch's weights under <out>/epochs/.
    #[arg(long)]
    pub save_epochs: bool,
    /// JSON file with defaults for any of the numeric options above.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Test split JSONL.
    #[arg(long)]
    pub test: PathBuf,
    /// Row label in reports.
    #[arg(long, default_value = "model")]
    pub name: String,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub ckpt_a: PathBuf,
    #[arg(long)]
    pub ckpt_b: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value = "SFT")]
    pub name_a: String,
    #[arg(long, default_value = "Contrastive")]
    pub name_b: String,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct ChisqArgs {
    /// Counts in row-major order: n00 n01 n10 n11.
    #[arg(long, num_args = 4, required = true, value_names = ["N00", "N01", "N10", "N11"])]
    pub table: Vec<u64>,
    /// Apply Yates continuity correction.
    #[arg(long)]
    pub yates: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
