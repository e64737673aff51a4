use std::ops::Range;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::run::parse_range;

#[derive(Debug, Parser)]
#[command(name = "wla", version, about = "Weather latent autoencoder toolkit")]
pub struct Cli {
    /// Worker threads; defaults to the number of physical cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic archive of `.wgrid` fields.
    GenData(GenData),
    /// Train an autoencoder on an archive.
    TrainWla(TrainWla),
    /// Encode one field into a `.wlat` file.
    Compress(Compress),
    /// Decode a `.wlat` file back to a `.wgrid` field.
    Decompress(Decompress),
    /// Ratio, bits per sub-pixel and error of a compressed field, or the
    /// geometry-only table with `--dry-run`.
    Measure(Measure),
    /// Ablation grid over pressure-level counts and token bit widths.
    Sweep(Sweep),
    /// Compress an archive into a sharded latent dataset.
    BuildLatentDs(BuildLatentDs),
    /// Train a latent forecaster on the tokens of a latent dataset.
    TrainForecaster(TrainForecaster),
    /// Roll forecasters out on the test split and score them in pixel space.
    EvalForecast(EvalForecast),
    /// Render tables and plots from run directories.
    Report(Report),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainWla(_) => "train-wla",
            Command::Compress(_) => "compress",
            Command::Decompress(_) => "decompress",
            Command::Measure(_) => "measure",
            Command::Sweep(_) => "sweep",
            Command::BuildLatentDs(_) => "build-latent-ds",
            Command::TrainForecaster(_) => "train-forecaster",
            Command::EvalForecast(_) => "eval-forecast",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Dynamics {
    /// Independent fields, one seed per step.
    Independent,
    /// Zonal advection with stochastic forcing.
    Advective,
}

#[derive(Debug, Args, Serialize)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "z500,t850,u850,v850,t2m,msl")]
    pub subset: String,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Dynamics::Independent)]
    pub dynamics: Dynamics,
    /// Zonal shift per step in pixels (advective dynamics).
    #[arg(long, default_value_t = 6)]
    pub shift: usize,
    /// Persistence of anomalies between steps (advective dynamics).
    #[arg(long, default_value_t = 0.95)]
    pub memory: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Two-block stacks of width 16 for smoke tests.
    Tiny,
    /// Width 64, depths 4/8.
    Toy,
    /// Width 128, depths 4/8.
    Desk,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainWla {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Channels to train on; defaults to every channel of the archive.
    #[arg(long)]
    pub subset: Option<String>,
    /// Training steps of the archive, `a..b`; defaults to all.
    #[arg(long, value_parser = parse_range)]
    pub train: Option<Range<u64>>,
    /// Held-out steps for the evaluation table.
    #[arg(long, value_parser = parse_range)]
    pub test: Option<Range<u64>>,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    #[arg(long, default_value_t = 32)]
    pub nb: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Warm-up steps; defaults to 5% of the run.
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_peak: f64,
    #[arg(long, default_value_t = 5e-5)]
    pub lr_floor: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_entropy: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write `ckpt_<step>.wckp` every K steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Continue from a checkpoint instead of a fresh model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct Compress {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct Decompress {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Patch {
    /// 15x14 patches, stride 10, padding 2.
    Era5,
    /// 8x8 patches, stride 6, padding 2.
    Desk,
}

#[derive(Debug, Args, Serialize)]
pub struct Measure {
    /// Geometry only: no model, no data.
    #[arg(long, conflicts_with_all = ["input", "original", "model"])]
    pub dry_run: bool,
    #[arg(long, default_value_t = 721)]
    pub height: usize,
    #[arg(long, default_value_t = 1440)]
    pub width: usize,
    #[arg(long, value_enum, default_value_t = Patch::Era5)]
    pub patch: Patch,
    #[arg(long, value_delimiter = ',', default_value = "25,13,8,6")]
    pub channels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "128,32")]
    pub nb: Vec<usize>,
    /// Compressed field to measure.
    #[arg(long, required_unless_present = "dry_run", requires = "original")]
    pub input: Option<PathBuf>,
    /// The field that was compressed.
    #[arg(long)]
    pub original: Option<PathBuf>,
    /// Model for the reconstruction error; without it only sizes are reported.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct Sweep {
    #[arg(long, value_delimiter = ',', default_value = "6,13,25")]
    pub levels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,96,128")]
    pub nb: Vec<usize>,
    #[arg(long, default_value_t = 721)]
    pub height: usize,
    #[arg(long, default_value_t = 1440)]
    pub width: usize,
    #[arg(long, value_enum, default_value_t = Patch::Era5)]
    pub patch: Patch,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Archive with the upper-air variable on enough levels; when given,
    /// every row is retrained and its reconstruction error reported.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Variable whose levels are swept when retraining.
    #[arg(long, default_value = "t")]
    pub variable: String,
    #[arg(long, value_parser = parse_range)]
    pub train: Option<Range<u64>>,
    #[arg(long, value_parser = parse_range)]
    pub test: Option<Range<u64>>,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub preset: Preset,
    #[arg(long, default_value_t = 200)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildLatentDs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `name=checkpoint`; the checkpoint's subset defines the family.
    #[arg(long = "family", required = true)]
    pub families: Vec<String>,
    /// Train, validation and test lengths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub splits: Vec<u64>,
    #[arg(long, default_value_t = 0)]
    pub start: u64,
    /// Keep this split losslessly as well.
    #[arg(long)]
    pub sidecar: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainForecaster {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub family: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1500)]
    pub steps: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub window: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalForecast {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub family: String,
    /// Autoencoder that wrote the family's shards.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub forecaster: PathBuf,
    /// Pixel archive holding the verifying fields.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub leads: usize,
    /// Stride between initial times within the test split.
    #[arg(long, default_value_t = 3)]
    pub init_every: usize,
    /// Also train and score the pixel-space counterpart for this many steps.
    #[arg(long)]
    pub pixel_steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct Report {
    /// Run directories to read (`forecast.csv`, `sweep.csv`, `loss.csv`).
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
