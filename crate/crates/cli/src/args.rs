use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "genie", version, about = "Train, render, edit and verify Gaussian-anchored neural fields")]
pub struct Cli {
    /// Worker threads for rendering and training (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a scene from a transforms-JSON dataset and write a checkpoint.
    Train(TrainArgs),
    /// Render one view of a checkpoint to PNG.
    Render(RenderArgs),
    /// Apply an edit script to a baked checkpoint.
    Edit(EditArgs),
    /// Run the self-check suites against a checkpoint.
    Verify(VerifyArgs),
    /// Time proximity search and rendering on random scenes; CSV on stdout.
    Bench(BenchArgs),
    /// Start the local editing service.
    Serve(ServeArgs),
    /// Write the procedural toy dataset.
    GenToy(GenToyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Live,
    Baked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConfidenceArg {
    Additive,
    Multiplicative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    All,
    Rtgps,
    DropBound,
    Gradients,
}

/// Overrides of the proximity-search settings.
#[derive(Clone, Debug, Default, Args)]
pub struct SplashArgs {
    /// Confidence-sphere quantile.
    #[arg(long)]
    pub q: Option<f64>,
    /// Neighbors per query.
    #[arg(long)]
    pub k: Option<usize>,
    /// Use `Q * max variance` (the raw largest eigenvalue) as the sphere
    /// radius instead of `Q * sqrt(max variance)`.
    #[arg(long)]
    pub raw_eigenvalue_radius: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// transforms.json of the training dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[command(flatten)]
    pub splash: SplashArgs,
    #[arg(long, value_enum)]
    pub confidence_mode: Option<ConfidenceArg>,
    /// Optimize Gaussian means.
    #[arg(long, conflicts_with = "no_learnable_means")]
    pub learnable_means: bool,
    /// Freeze Gaussian means.
    #[arg(long)]
    pub no_learnable_means: bool,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Camera description (JSON).
    #[arg(long, required_unless_present = "dataset", conflicts_with = "dataset")]
    pub camera: Option<PathBuf>,
    /// Render a camera taken from this dataset instead of `--camera`.
    #[arg(long, requires = "frame")]
    pub dataset: Option<PathBuf>,
    /// Frame index within `--dataset`.
    #[arg(long)]
    pub frame: Option<usize>,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the float image (width, height, then r, g, b, alpha).
    #[arg(long)]
    pub raw: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per ray.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub splash: SplashArgs,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Edit script (TOML list of `[[edit]]` tables).
    #[arg(long)]
    pub script: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Write a checkpoint after every deform frame into this directory.
    #[arg(long)]
    pub snapshots: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random probe points for the proximity oracle.
    #[arg(long, default_value_t = 200)]
    pub queries: usize,
    /// Trials per epsilon for the drop bound.
    #[arg(long, default_value_t = 300)]
    pub trials: usize,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub splash: SplashArgs,
    /// Halve one stored radius after building the index.
    #[arg(long, hide = true)]
    pub inject_radius_fault: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Scene sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [1000, 10000])]
    pub n: Vec<usize>,
    /// Neighbor counts.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 4, 16])]
    pub k: Vec<usize>,
    /// Sphere quantiles.
    #[arg(long, value_delimiter = ',', default_values_t = [2.0])]
    pub q: Vec<f64>,
    /// Timed queries per row.
    #[arg(long, default_value_t = 500)]
    pub queries: usize,
    /// Side of the square image timed for rays per second (0 skips it).
    #[arg(long, default_value_t = 32)]
    pub render_size: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoint to load at startup.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Mesh file or frame directory to bind at startup.
    #[arg(long, requires = "checkpoint")]
    pub mesh: Option<PathBuf>,
    /// Listen address; keep it on loopback unless the network is trusted.
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub bind: SocketAddr,
    /// Queue concurrent edits instead of answering 409.
    #[arg(long)]
    pub queue_writers: bool,
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub blobs: usize,
    #[arg(long, default_value_t = 8)]
    pub cameras: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: u32,
}
