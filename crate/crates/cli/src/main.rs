//! `vtts`: corpus generation, training, generation and evaluation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use vtts_core::layout::{LayoutKind, PositionScheme};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

macro_rules! runtime_from {
    ($($t:ty),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    std::io::Error,
    serde_json::Error,
    hound::Error,
    vtts_core::train::TrainError,
    vtts_core::synth::SynthError,
    vtts_core::layout::LayoutError,
    vtts_core::meldsp::DspError,
    vtts_core::timesync::TimeSyncError,
    vtts_core::tensorfile::TensorFileError,
    vtts_core::model::ModelError,
    vtts_core::tokenizers::TokenizerError,
);

impl From<vtts_core::sampler::SamplerError> for CliError {
    fn from(e: vtts_core::sampler::SamplerError) -> Self {
        match e {
            vtts_core::sampler::SamplerError::DropBoth => CliError::Usage(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "vtts", version, about = "Video-text-to-speech toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    SynthData(SynthDataArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Generate speech for every sample of a corpus split.
    Generate(GenerateArgs),
    /// Score generated speech against ground-truth alignments.
    EvalTimesync(EvalTimesyncArgs),
    /// Report dMel round-trip error on a directory of WAV files.
    CodecRoundtrip(CodecRoundtripArgs),
    /// Print the sequence plan of one sample.
    InspectPlan(InspectPlanArgs),
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Toy-world config (TOML); defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_eval: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (TOML). Required unless resuming.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; falls back to `VTTS_RUN_DIR`, then `runs/default`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this global step instead of `optimizer.total_steps`.
    #[arg(long)]
    pub until: Option<u64>,
    /// Held-out samples scored at each checkpoint.
    #[arg(long, default_value_t = 50)]
    pub eval_samples: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory containing `manifest.jsonl`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
    pub split: SplitArg,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub drop_video: bool,
    #[arg(long)]
    pub drop_text: bool,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub stop_rule: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the inverted log-mel spectrogram.
    #[arg(long)]
    pub mel: bool,
    /// Also write a Griffin-Lim waveform (WAV) with this many iterations.
    #[arg(long)]
    pub wav_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalTimesyncArgs {
    /// Ground-truth corpus directory.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory written by `generate`. Alignments under `align/` are used
    /// when present, otherwise DTW against the ground truth.
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub bin_width: f64,
}

#[derive(Debug, Args)]
pub struct CodecRoundtripArgs {
    #[arg(long)]
    pub audio_dir: PathBuf,
    /// Mel analysis config (TOML).
    #[arg(long)]
    pub mel_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectPlanArgs {
    /// Run config supplying layout and positions.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub layout: Option<LayoutArg>,
    #[arg(long, value_enum)]
    pub pos: Option<PosArg>,
    #[arg(long, requires = "sample")]
    pub corpus: Option<PathBuf>,
    #[arg(long, requires = "corpus")]
    pub sample: Option<String>,
    #[arg(long, conflicts_with = "corpus")]
    pub text: Option<String>,
    #[arg(long, conflicts_with = "corpus")]
    pub video_frames: Option<usize>,
    #[arg(long, conflicts_with = "corpus")]
    pub speech_frames: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LayoutArg {
    Tts,
    TvOrdered,
    VtOrdered,
    TvStreaming,
    VOnly,
}

impl From<LayoutArg> for LayoutKind {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Tts => LayoutKind::Tts,
            LayoutArg::TvOrdered => LayoutKind::TvOrdered,
            LayoutArg::VtOrdered => LayoutKind::VtOrdered,
            LayoutArg::TvStreaming => LayoutKind::TvStreaming,
            LayoutArg::VOnly => LayoutKind::VOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PosArg {
    Global,
    TimeAligned,
}

impl From<PosArg> for PositionScheme {
    fn from(p: PosArg) -> Self {
        match p {
            PosArg::Global => PositionScheme::Global,
            PosArg::TimeAligned => PositionScheme::time_aligned(),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::EvalTimesync(a) => commands::eval_timesync(&a),
        Command::CodecRoundtrip(a) => commands::codec_roundtrip(&a),
        Command::InspectPlan(a) => commands::inspect_plan(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
