//! Command-line driver: dataset generation, training, evaluation, sampling,
//! gradient checks and ablations.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod error;
pub mod layout;

pub use error::{CliError, CliResult};

/// Default dataset directory when `--data`/`--out` is omitted.
pub const DATA_ENV: &str = "MMST_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "mmst", version, about = "Multi-modal trajectory prediction with a capsule-encoded conditional VAE")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes and the example cache.
    GenData(GenDataArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a list of sample counts.
    Eval(EvalArgs),
    /// Draw predictions for one example as CSV plus an SVG overlay.
    Sample(SampleArgs),
    /// Dump one cached example's rasters as PGM images plus an SVG overlay.
    Rasterize(RasterizeArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run one of the ablation grids.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    #[arg(long, env = DATA_ENV)]
    pub out: PathBuf,
    /// Training config whose model horizons and rasters the cache follows.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; omitted fields take desk-scale defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's number of latent samples in the MoN term.
    #[arg(long)]
    pub mon_n: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Standard,
    Literal,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10, 20, 50, 100, 200])]
    pub k: Vec<usize>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Metrics CSV path; defaults to `metrics/eval_<split>.csv` in the run.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Standard)]
    pub mode: ModeArg,
    /// Sampling seed; defaults to the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Example id, e.g. `s0003-a1-t010`.
    #[arg(long)]
    pub example: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Output directory; defaults to `samples/<example>` in the run.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RasterizeArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long)]
    pub example: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Dims {
    Small,
    Full,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Dims::Small)]
    pub dims: Dims,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    MonN,
    Distance,
    KSweep,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub kind: AblationKind,
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained model for `k-sweep`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sample counts for the table ablations.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 25, 50, 100])]
    pub k: Vec<usize>,
    /// Largest exponent of the k-sweep (`2^4 ..= 2^max`).
    #[arg(long, default_value_t = 13)]
    pub max_exp: u32,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Rasterize(a) => commands::rasterize(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Ablate(a) => commands::ablate(&a),
    }
}
