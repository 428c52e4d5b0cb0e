//! Experiment commands behind the `contbern` binary.
//!
//! Every invocation emits exactly one [`RunSummary`] as JSON, to `--summary`
//! when given and to stdout otherwise.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod output;

pub use output::RunSummary;

/// Environment variable overriding the default MNIST directory.
pub const MNIST_DIR_ENV: &str = "CONTBERN_MNIST_DIR";
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// `$CONTBERN_MNIST_DIR`, or `data/mnist` under the working directory.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV).map_or_else(|| PathBuf::from("data/mnist"), PathBuf::from)
}

fn mnist_file(explicit: &Option<PathBuf>, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| default_mnist_dir().join(name))
}

#[derive(Debug, Parser)]
#[command(name = "contbern", version, about = "Continuous Bernoulli experiments")]
pub struct Cli {
    /// Write the run summary JSON here instead of stdout.
    #[arg(long, global = true)]
    pub summary: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate log C, mean, variance and entropy over a λ grid.
    DistTable(DistTableArgs),
    /// Fit CB mixtures by EM with and without the normalizer and report KL to the truth.
    EmExperiment(EmArgs),
    /// Train a VAE on (warped) MNIST.
    TrainVae(TrainArgs),
    /// k-NN accuracy of encoder-mean embeddings.
    KnnEval(KnnArgs),
    /// Decode prior draws into a PGM image grid.
    Sample(SampleArgs),
    /// Apply the pixel warp to an IDX image file.
    Warp(WarpArgs),
}

#[derive(Debug, Args)]
pub struct DistTableArgs {
    /// Number of grid points over [ε, 1−ε].
    #[arg(long, default_value_t = 101)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmArgs {
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    #[arg(long, default_value_t = 8)]
    pub k_max: usize,
    /// Explicit list of K values; overrides --k-min/--k-max.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long, default_value_t = 50)]
    pub dims: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Monte-Carlo samples per KL estimate.
    #[arg(long, default_value_t = 10_000)]
    pub kl_samples: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Cb,
    /// Logit decoder scored without log C regardless of --norm-const.
    Bernoulli,
    Gaussian,
}

impl From<Kind> for contbern::vae::LikelihoodKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Cb => Self::Cb,
            Kind::Bernoulli => Self::Bernoulli,
            Kind::Gaussian => Self::Gaussian,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub likelihood: Kind,
    #[arg(long, value_enum, default_value = "on")]
    pub norm_const: Switch,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub gamma: f64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Leading training images used.
    #[arg(long, default_value_t = 5000)]
    pub subset: usize,
    /// Leading test images scored in the cross-evaluation.
    #[arg(long, default_value_t = 2000)]
    pub eval_subset: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub latent: usize,
    #[arg(long, default_value_t = 500)]
    pub hidden: usize,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Importance samples for the per-epoch iwll column (0 leaves it empty).
    #[arg(long, default_value_t = 0)]
    pub iw_k: usize,
    #[arg(long, default_value_t = 100)]
    pub iw_rows: usize,
    #[arg(long)]
    pub train_images: Option<PathBuf>,
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, alias = "train-idx")]
    pub train_images: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long, alias = "test-idx")]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// Leading training images used as neighbours.
    #[arg(long)]
    pub train_subset: Option<usize>,
    /// Warp applied to both sets before embedding.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub gamma: f64,
    #[arg(long, default_value_t = 15)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    /// Decoder parameters (λ or η).
    Params,
    /// One draw from the decoded distribution.
    Draws,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "params")]
    pub mode: SampleMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tiles per grid row.
    #[arg(long, default_value_t = 10)]
    pub cols: usize,
    /// Also write one PGM per sample next to the grid.
    #[arg(long)]
    pub tiles: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs the command and returns its summary without emitting it.
pub fn run(cli: &Cli) -> Result<RunSummary> {
    let start = Instant::now();
    let mut summary = match &cli.command {
        Command::DistTable(a) => commands::dist_table(a)?,
        Command::EmExperiment(a) => commands::em_experiment(a)?,
        Command::TrainVae(a) => commands::train_vae(a)?,
        Command::KnnEval(a) => commands::knn_eval(a)?,
        Command::Sample(a) => commands::sample(a)?,
        Command::Warp(a) => commands::warp(a)?,
    };
    summary.wall_seconds = start.elapsed().as_secs_f64();
    Ok(summary)
}

/// [`run`], then writes the summary once.
pub fn execute(cli: &Cli) -> Result<()> {
    let summary = run(cli)?;
    let json = serde_json::to_string_pretty(&summary)?;
    match &cli.summary {
        Some(path) => output::write_file(path, format!("{json}\n").as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}
