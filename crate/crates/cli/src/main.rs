mod commands;
mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use settings::{ConsensusFlags, FitFlags};

#[derive(Debug, Parser)]
#[command(name = "ziptf", version, about = "Zero-inflated Poisson tensor factorization and consensus analysis")]
struct Cli {
    /// Worker threads for restarts; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// JSON file with default settings; flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SimKind {
    Tensor,
    Scrna,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Ev,
    Cosine,
    Pearson,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic tensor or single-cell count matrix.
    Simulate {
        #[arg(long, value_enum)]
        kind: SimKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Tensor shape, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "10,20,300")]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 9)]
        rank: usize,
        /// Probability of excess zeros.
        #[arg(long, default_value_t = 0.0)]
        phi: f64,
        #[arg(long, default_value_t = 3000)]
        cells: usize,
        #[arg(long, default_value_t = 1000)]
        genes: usize,
        #[arg(long, default_value_t = 4)]
        donors: usize,
        #[arg(long, default_value_t = 4)]
        cell_types: usize,
        #[arg(long, default_value_t = 5)]
        identity_programs: usize,
        #[arg(long, default_value_t = 3)]
        activity_programs: usize,
        #[arg(long, default_value_t = 100)]
        genes_per_program: usize,
        #[arg(long, default_value_t = 0.5)]
        log2fc: f64,
        #[arg(long, default_value_t = 0.05)]
        doublet_rate: f64,
        #[arg(long, default_value_t = 1.0)]
        dropout_midpoint: f64,
        #[arg(long, default_value_t = 1.0)]
        dropout_shape: f64,
        #[arg(long)]
        no_dropout: bool,
    },
    /// Fit one model.
    Factorize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Noise-free tensor to score against as well.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        fit: FitFlags,
    },
    /// Restarts, consensus on one mode and a refit.
    Consensus {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        fit: FitFlags,
        #[command(flatten)]
        consensus: ConsensusFlags,
    },
    /// Consensus fits over a range of ranks.
    RankScan {
        #[arg(long)]
        input: PathBuf,
        /// `lo..hi` (inclusive) or a comma-separated list.
        #[arg(long)]
        ranks: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fit: FitFlags,
        #[command(flatten)]
        consensus: ConsensusFlags,
    },
    /// Build a sample × cell type × gene tensor from counts.
    Pseudobulk {
        /// `sample  cell_type  gene  count` TSV.
        #[arg(long, conflicts_with_all = ["cells", "labels"])]
        triplets: Option<PathBuf>,
        /// `cell  gene  count` TSV, used with --labels.
        #[arg(long, requires = "labels")]
        cells: Option<PathBuf>,
        /// `cell  sample  cell_type` TSV.
        #[arg(long, requires = "cells")]
        labels: Option<PathBuf>,
        /// Drop samples and cell types with fewer than this share of cells.
        #[arg(long, requires = "cells")]
        min_fraction: Option<f64>,
        #[arg(long, default_value_t = 50)]
        min_gene_count: u64,
        #[arg(long)]
        cpm: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fitted model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Tensor for `ev`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Model directory for `cosine`; model directory or CSV matrix for `pearson`.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Mode compared by `pearson`; defaults to the last.
        #[arg(long)]
        mode: Option<usize>,
        /// Also write the JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(ziptf::Error),
}

impl From<ziptf::Error> for Failure {
    fn from(e: ziptf::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        use ziptf::Error as E;
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(e) if e.is_numerical() => 4,
            Failure::Core(E::InvalidArgument(_) | E::UnknownMethod(_)) => 2,
            Failure::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure::Core(ziptf::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
