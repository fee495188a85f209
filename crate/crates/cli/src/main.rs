mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rvqcomm::Error;

#[derive(Debug, Parser)]
#[command(
    name = "rvqcomm",
    version,
    about = "Index-only feature codec and exchange simulator"
)]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Directory for every file the command writes.
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes and a corpus manifest.
    Gen(GenArgs),
    /// Train a codec and write its codebook bundle.
    Train(TrainArgs),
    /// Encode a feature tensor into an index payload.
    Encode(EncodeArgs),
    /// Decode an index payload into a reconstructed feature tensor.
    Decode(DecodeArgs),
    /// Encode, serialize, parse and decode one map, checking the indices survive.
    Roundtrip(RoundtripArgs),
    /// Code usage of one quantizer stage over a corpus.
    Stats(StatsArgs),
    /// Rate table, and distortion where trained bundles exist.
    Sweep(SweepArgs),
    /// Run exchange rounds described by a world file.
    Simulate(SimulateArgs),
}

/// Scene shape shared by every command that generates maps.
#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.97)]
    pub background_fraction: f64,
    #[arg(long, default_value_t = 12)]
    pub blobs: usize,
}

/// Maps to train or evaluate on: a manifest, or generated scenes.
#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Corpus manifest written by `gen`.
    #[arg(long, conflicts_with = "synthetic")]
    pub corpus: Option<PathBuf>,
    /// Manifest split to use; all entries when omitted.
    #[arg(long, requires = "corpus")]
    pub split: Option<String>,
    /// Generate this many scenes instead, seeds starting at `--first-scene`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub first_scene: u64,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// First scene seed; defaults to `--seed`.
    #[arg(long)]
    pub first_scene: Option<u64>,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Scenes for a second split, seeds following the first split.
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    #[command(flatten)]
    pub scene: SceneArgs,
}

/// Codec shape flags.
#[derive(Debug, Clone, Args)]
pub struct CodecArgs {
    /// Codebook size per stage.
    #[arg(long = "K", default_value_t = 64)]
    pub k: usize,
    /// Number of residual stages.
    #[arg(long, default_value_t = 3)]
    pub nq: usize,
    /// Channel reduction ratio `C / C_r`.
    #[arg(long, default_value_t = 16)]
    pub crr: usize,
    /// Weight of the mean assigned residual in each EMA codebook update
    /// [default: 0.8, or `ema_alpha` from `--config`].
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub codec: CodecArgs,
    #[command(flatten)]
    pub data: CorpusArgs,
    /// TOML training manifest; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Write a checkpoint after every epoch.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Bundle file name inside the output directory.
    #[arg(long, default_value = "model.rvqc")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: u32,
    #[arg(long, default_value_t = 0)]
    pub agent: u16,
    #[arg(long, default_value = "payload.rvqp")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub payload: PathBuf,
    #[arg(long, default_value = "decoded.rvqt")]
    pub out: PathBuf,
    /// Reference tensor to report reconstruction error against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    /// Trained bundle; an untrained codec from `--seed` otherwise.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Feature tensor; a generated scene from `--seed` otherwise.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub codec: CodecArgs,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub stage: usize,
    #[command(flatten)]
    pub data: CorpusArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long = "K", value_delimiter = ',', default_values_t = [4, 16, 64, 256, 1024])]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [3])]
    pub nq: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [16])]
    pub crr: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.8])]
    pub alpha: Vec<f64>,
    /// Directory of bundles named `k{K}_nq{n_q}_crr{C_rr}_a{alpha}.rvqc`.
    #[arg(long)]
    pub bundles: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    /// Evaluation maps; only the first map's shape matters for rate columns.
    #[command(flatten)]
    pub data: CorpusArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML world file.
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub frames: u32,
    #[arg(long, default_value_t = 0)]
    pub first_frame: u32,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Shape(_)) => 2,
        Some(Error::Io { .. }) => 3,
        Some(Error::Protocol(_) | Error::Truncated { .. } | Error::CorruptPayload(_)) => 4,
        Some(Error::CodebookDesync { .. }) => 5,
        Some(Error::State(_) | Error::Numerical(_)) | None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
