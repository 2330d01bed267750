//! `pulsegpt`: command-line front end for synthesis, training, evaluation and
//! attention analysis. Every command resolves defaults < `--config` file <
//! flags, writes the resolved config and a `run.json` manifest into its run
//! directory, and exits 0 on success, 2 on usage errors, 3 on data errors and
//! 4 on numerical failures.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pulsegpt_core::signal::Modality;
use pulsegpt_core::synth::CohortRhythm;
use pulsegpt_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "pulsegpt", version, about = "Generative pre-trained transformer for pulsatile signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic PPG or ECG cohort with a dataset manifest.
    Synth(SynthArgs),
    /// Preprocess and tokenize a dataset; write windows and token streams.
    Tokenize(TokenizeArgs),
    /// Pre-train a model on next-token prediction.
    Pretrain(PretrainArgs),
    /// Autoregressively continue one signal window.
    Generate(GenerateArgs),
    /// Measure prediction error as a function of horizon.
    EvalHorizon(EvalHorizonArgs),
    /// Fine-tune the final block and a classification head for AF detection.
    Finetune(FinetuneArgs),
    /// Leave-one-subject-out AF fine-tuning and AUC.
    Loso(LosoArgs),
    /// Head-averaged attention of the final token, per layer.
    AttnAggregate(AttnAggregateArgs),
    /// Mean look-back distance per layer.
    AttnLookback(AttnLookbackArgs),
    /// Residual-stream cosine similarity of rising and falling slope tokens.
    AttnSimilarity(AttnSimilarityArgs),
    /// Shift-and-add attention maps of the final-block heads.
    AttnHeads(AttnHeadsArgs),
    /// Change in final-layer attention between two checkpoints.
    AttnDelta(AttnDeltaArgs),
    /// Re-render an SVG figure from a CSV produced by another command.
    ExportFigure(ExportFigureArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// JSON config file overriding the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory (default: $PULSEGPT_RUN_ROOT/<command>, root "runs").
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Band edges given as `lo,hi` in Hz.
#[derive(Debug, Clone)]
pub struct Band(pub Option<(f64, f64)>);

impl FromStr for Band {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "off" || s == "none" {
            return Ok(Band(None));
        }
        let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Band(Some((parse(lo)?, parse(hi)?))))
    }
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Model sampling rate in Hz.
    #[arg(long)]
    pub fs: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub shift: Option<usize>,
    /// Band-pass edges `lo,hi` in Hz, or `off`.
    #[arg(long)]
    pub bandpass: Option<Band>,
    /// Train fraction of the pre-training split.
    #[arg(long)]
    pub split: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub eval_iters: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub modality: Option<Modality>,
    #[arg(long)]
    pub subjects: Option<usize>,
    /// regular, af or mixed.
    #[arg(long)]
    pub rhythm: Option<CohortRhythm>,
    /// Sampling rate of the written records.
    #[arg(long)]
    pub fs: Option<f64>,
    /// Seconds per subject.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Write little-endian f32 samples instead of CSV.
    #[arg(long)]
    pub f32: bool,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset manifest (dataset.json).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint directory or pre-training run directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Signal file with its JSON sidecar.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// First sample of the context, after resampling.
    #[arg(long)]
    pub start: Option<usize>,
    #[arg(long)]
    pub n_new: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, conflicts_with = "temperature")]
    pub argmax: bool,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct EvalHorizonArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Evaluate at most this many windows.
    #[arg(long)]
    pub windows: Option<usize>,
    /// Samples between evaluation windows.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub rollouts: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, conflicts_with = "temperature")]
    pub argmax: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Rollouts exported as CSV and SVG.
    #[arg(long)]
    pub examples: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labelled dataset manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Also train the final layer norm.
    #[arg(long)]
    pub train_final_norm: bool,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct LosoArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Pre-trained base (random initialization when omitted).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labelled dataset (a synthetic mixed cohort when omitted).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Synthetic cohort size.
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Synthetic seconds per subject.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct AttnAggregateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub start: Option<usize>,
    /// Layers to export, 1-based (repeatable; default all).
    #[arg(long)]
    pub layer: Vec<usize>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct AttnLookbackArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Use at most this many windows.
    #[arg(long)]
    pub windows: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct AttnSimilarityArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub start: Option<usize>,
    /// Reference token position (default: first rising token nearest the value).
    #[arg(long)]
    pub reference: Option<usize>,
    /// Token value used to pick the reference.
    #[arg(long)]
    pub reference_value: Option<usize>,
    /// Allowed distance from the reference token value.
    #[arg(long)]
    pub tolerance: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct AttnHeadsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub start: Option<usize>,
    /// Map length; the input must hold 2n-1 samples from `start`.
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct AttnDeltaArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Pre-trained checkpoint.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Fine-tuned checkpoint.
    #[arg(long)]
    pub tuned: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub start: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FigureKind {
    /// rollout-NNN.csv from eval-horizon.
    Rollout,
    /// Attention weights or delta CSV.
    Weights,
    /// horizon.csv from eval-horizon.
    Horizon,
    /// loss.csv, steps.csv or losses.csv.
    Loss,
}

#[derive(Args, Debug)]
pub struct ExportFigureArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long, value_enum)]
    pub kind: FigureKind,
    /// Token CSV (position,token) drawn under attention weights.
    #[arg(long)]
    pub signal: Option<PathBuf>,
    /// Output file name inside the run directory.
    #[arg(long)]
    pub output: Option<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Json { .. } => 2,
        _ => match e.kind() {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Tokenize(a) => commands::tokenize(a),
        Command::Pretrain(a) => commands::pretrain_cmd(a),
        Command::Generate(a) => commands::generate_cmd(a),
        Command::EvalHorizon(a) => commands::eval_horizon(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Loso(a) => commands::loso(a),
        Command::AttnAggregate(a) => commands::attn_aggregate(a),
        Command::AttnLookback(a) => commands::attn_lookback(a),
        Command::AttnSimilarity(a) => commands::attn_similarity(a),
        Command::AttnHeads(a) => commands::attn_heads(a),
        Command::AttnDelta(a) => commands::attn_delta(a),
        Command::ExportFigure(a) => commands::export_figure(a),
    };
    match result {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
