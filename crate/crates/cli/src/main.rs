//! Command-line driver for the bound sweeps, attention checks, toy training
//! and cost tables.
//!
//! Exit codes: 0 success, 1 verification failure or runtime error, 2 usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Verification(String),
    Runtime(String),
}

impl Failure {
    pub fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Verification(_) | Failure::Runtime(_) => 1,
        }
    }
}

impl From<superpose::Error> for Failure {
    fn from(e: superpose::Error) -> Self {
        match e {
            superpose::Error::InvalidParameter(_)
            | superpose::Error::InvalidDimension(_)
            | superpose::Error::DimensionMismatch { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "superpose", version, about = "Computation-in-superposition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-form interference bounds against Monte Carlo estimates.
    Bounds(BoundsArgs),
    /// Kernel and linear-attention fidelity checks.
    Attention(AttentionArgs),
    /// Train the toy superposed convolutional network.
    Train(TrainArgs),
    /// Evaluate a checkpoint under several channel partitions.
    EvalDynamic(EvalArgs),
    /// Multiply-accumulate cost tables for the presets.
    Macs(MacsArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CommonArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Primary output file; the manifest is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..256))]
    pub workers: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKindArg {
    Hoeffding,
    Cleanup,
    FavorS,
    Hadamard,
}

#[derive(Args, Debug, Serialize)]
pub struct BoundsArgs {
    #[arg(long, value_enum)]
    pub kind: BoundKindArg,
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    pub dims: Vec<usize>,
    /// Thresholds given as angles: α = cos(angle).
    #[arg(long, value_delimiter = ',', conflicts_with = "alpha")]
    pub alpha_deg: Vec<f64>,
    /// Thresholds given directly (β for the Hadamard kind).
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckArg {
    Kernel,
    Favor,
    FavorS,
}

#[derive(Args, Debug, Serialize)]
pub struct AttentionArgs {
    #[arg(long, value_enum)]
    pub check: CheckArg,
    /// Monte Carlo samples per pair for the kernel check.
    #[arg(long, default_value_t = 1_000_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    /// Number of (x, y) pairs for the kernel check.
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
    /// Token dimension for the kernel and FAVOR+ checks.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Feature counts swept by the FAVOR+ check.
    #[arg(long, value_delimiter = ',', default_value = "1024,4096,16384")]
    pub features: Vec<usize>,
    /// Random features for the FAVOR+S check.
    #[arg(long, default_value_t = 4096)]
    pub r: usize,
    /// Dimensions swept by the FAVOR+S check.
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
    pub dims: Vec<usize>,
    /// Channel grid `MxN` for the FAVOR+S check.
    #[arg(long, default_value = "2x2", value_parser = parse_grid)]
    pub grid: (usize, usize),
    /// Seeds (FAVOR+) or seed families (FAVOR+S); defaults to 8 and 16.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationArg {
    Relu,
    Prelu,
    Srelu,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub channels: u64,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Isometry regularizer weight.
    #[arg(long, default_value_t = 1e-4)]
    pub gamma: f64,
    /// Key orthogonality regularizer weight.
    #[arg(long, default_value_t = 0.1)]
    pub mu: f64,
    /// Share of steps with distinct inputs per channel.
    #[arg(long, default_value_t = 0.8)]
    pub fast_fraction: f64,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Prelu)]
    pub activation: ActivationArg,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    /// Checkpoint path; defaults to `checkpoint.bin` beside the metrics file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "fast,normal,slow")]
    pub modes: Vec<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct MacsArgs {
    /// One of the names listed by the usage error when omitted.
    #[arg(long)]
    pub preset: Option<String>,
    /// Superposition channels (convolutional preset).
    #[arg(long, value_delimiter = ',')]
    pub channels: Vec<usize>,
    /// baseline, performer, att or att+mlp (transformer preset).
    #[arg(long)]
    pub mode: Option<String>,
    /// Square channel grid `NxN` (transformer preset).
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    #[command(flatten)]
    pub common: CommonArgs,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (m, n) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected MxN, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&v| v > 0);
    match (parse(m), parse(n)) {
        (Some(m), Some(n)) => Ok((m, n)),
        _ => Err(format!("expected two positive sizes in {s:?}")),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let workers = match &cli.command {
        Command::Bounds(a) => a.common.workers,
        Command::Attention(a) => a.common.workers,
        Command::Train(a) => a.common.workers,
        Command::EvalDynamic(a) => a.common.workers,
        Command::Macs(a) => a.common.workers,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers as usize).build().map_err(Failure::runtime)?;
    pool.install(|| match cli.command {
        Command::Bounds(a) => commands::bounds(&a),
        Command::Attention(a) => commands::attention(&a),
        Command::Train(a) => commands::train(&a),
        Command::EvalDynamic(a) => commands::eval_dynamic(&a),
        Command::Macs(a) => commands::macs(&a),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Usage(m) => ("usage error", m),
                Failure::Verification(m) => ("verification failed", m),
                Failure::Runtime(m) => ("error", m),
            };
            eprintln!("{kind}: {msg}");
            ExitCode::from(f.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("2x3"), Ok((2, 3)));
        assert_eq!(parse_grid("4X4"), Ok((4, 4)));
        assert!(parse_grid("0x2").is_err());
        assert!(parse_grid("4").is_err());
    }

    #[test]
    fn library_errors_map_to_exit_codes() {
        let f: Failure = superpose::Error::InvalidParameter("x".into()).into();
        assert_eq!(f.exit_code(), 2);
        let f: Failure = superpose::Error::Format("x".into()).into();
        assert_eq!(f.exit_code(), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
