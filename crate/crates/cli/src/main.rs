//! Command-line front end: data generation, training, SER evaluation,
//! timing benchmarks and arithmetic-cost reporting for the EP-family
//! detectors.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime or numerical
//! failures. Every run logs its fully resolved configuration to stderr and
//! embeds it as `# key = value` comments in file outputs, so any artifact
//! can be traced back to the exact settings (and reruns with the same seed
//! are byte-identical, timing files aside).

mod commands;
mod config;
mod output;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "gcepnet", version, about = "EP / GEPNet / GCEPNet MIMO detection toolkit")]
pub struct Cli {
    /// Cap the worker thread pool; 1 forces fully serial execution.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample detection problem instances into a batch file.
    Gen(GenArgs),
    /// Train a learned detector and write checkpoint/history files.
    Train(TrainArgs),
    /// Monte-Carlo symbol-error-rate sweep over an SNR grid.
    Eval(EvalArgs),
    /// Wall-clock inference benchmark across problem sizes.
    BenchTime(BenchTimeArgs),
    /// Arithmetic-cost table for the two GNN modules.
    BenchFlops(BenchFlopsArgs),
}

/// Detector/network shape flags shared by several subcommands.
#[derive(Debug, Args, Clone)]
pub struct DetectorFlags {
    /// Transmit antennas.
    #[arg(long)]
    pub nt: Option<usize>,
    /// Receive antennas (defaults to --nt).
    #[arg(long)]
    pub nr: Option<usize>,
    /// Modulation order exponent k: 1 = QPSK, 2 = 16-QAM, 3 = 64-QAM.
    #[arg(long)]
    pub qam: Option<u32>,
    /// EP iterations T.
    #[arg(long)]
    pub t: Option<usize>,
    /// GNN layers per EP iteration.
    #[arg(long)]
    pub gnn_layers: Option<usize>,
    /// Hidden node-signal width.
    #[arg(long)]
    pub nu: Option<usize>,
    /// First MLP hidden width.
    #[arg(long)]
    pub nh1: Option<usize>,
    /// Second MLP hidden width.
    #[arg(long)]
    pub nh2: Option<usize>,
    /// Chebyshev order M.
    #[arg(long)]
    pub m: Option<usize>,
    /// Damping weight on old EP parameters.
    #[arg(long)]
    pub damping: Option<f64>,
    /// Variance floor for posterior moments.
    #[arg(long)]
    pub variance_floor: Option<f64>,
    /// Cut gradients at the EP linear algebra during training.
    #[arg(long)]
    pub detach_ep: Option<bool>,
    /// Tie per-layer GNN parameters across layers.
    #[arg(long)]
    pub share_layer_params: Option<bool>,
    /// Use one shared embedding bias row instead of a per-node matrix.
    #[arg(long)]
    pub shared_node_bias: Option<bool>,
    /// Seed for parameter initialization.
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub nt: usize,
    #[arg(long)]
    pub nr: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub qam: u32,
    /// SNR in dB for every instance in the batch.
    #[arg(long)]
    pub snr: f64,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path for the instance batch file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config document ([detector] and [train] sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub shape: DetectorFlags,
    /// Network variant to train: gcepnet or gepnet.
    #[arg(long, default_value = "gcepnet")]
    pub variant: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iters_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub snr_lo: Option<f64>,
    #[arg(long)]
    pub snr_hi: Option<f64>,
    /// Validation SNR grid, comma separated.
    #[arg(long)]
    pub val_snrs: Option<String>,
    #[arg(long)]
    pub val_samples: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub sched_factor: Option<f64>,
    #[arg(long)]
    pub sched_patience: Option<usize>,
    #[arg(long)]
    pub sched_period: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output prefix: writes <out>.ckpt, <out>.history.csv, <out>.state.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from a .state file written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Use the full-scale training protocol as the baseline defaults.
    #[arg(long, default_value_t = false)]
    pub paper_protocol: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub shape: DetectorFlags,
    /// Detector(s) to evaluate, comma separated: ep, ml, gepnet, gcepnet.
    #[arg(long, default_value = "ep")]
    pub detector: String,
    /// SNR grid lo:hi:step (inclusive) or a single value.
    #[arg(long)]
    pub snr: String,
    #[arg(long)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint file for learned detectors.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Write per-iteration EP diagnostics (first instance per SNR point).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchTimeArgs {
    /// Transmit-antenna counts, comma separated.
    #[arg(long, default_value = "4,8,16,32")]
    pub sizes: String,
    /// Samples per (detector, size) measurement.
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    /// Detectors to time, comma separated.
    #[arg(long, default_value = "ep,gepnet,gcepnet")]
    pub detectors: String,
    #[arg(long, default_value_t = 9)]
    pub t: usize,
    #[arg(long, default_value_t = 1)]
    pub qam: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchFlopsArgs {
    /// Transmit-antenna counts, comma separated.
    #[arg(long, default_value = "4,8,16,32")]
    pub sizes: String,
    #[arg(long, default_value_t = 8)]
    pub nu: u64,
    #[arg(long, default_value_t = 64)]
    pub nh1: u64,
    #[arg(long, default_value_t = 32)]
    pub nh2: u64,
    #[arg(long, default_value_t = 3)]
    pub m: u64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<gcepnet_core::DetectorError> for CliError {
    fn from(e: gcepnet_core::DetectorError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<gcepnet_core::model::ModelError> for CliError {
    fn from(e: gcepnet_core::model::ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        // ignore the error if a pool already exists (tests share a process)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
