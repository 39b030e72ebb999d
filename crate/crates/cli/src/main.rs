mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Shape correspondence by point-cloud remapping with fixed Gaussian attention heads.
#[derive(Debug, Parser)]
#[command(name = "gaussmatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// Experiment config: a TOML file or a preset name (0gh, 4gh, 4gh.lis,
    /// 4gh.lis.noise, optionally prefixed with `mini-`).
    #[arg(long)]
    pub config: Option<String>,
    /// Directory receiving every output of the command.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Sets both the experiment seed and the dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Config override such as `optimizer.lr=3e-4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory under `<out>/data`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoints and loss logs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training-time noise augmentation as `stddev:fraction`.
        #[arg(long, value_parser = parse_noise, value_name = "SIGMA:FRACTION")]
        noise: Option<(f64, f64)>,
    },
    /// Score a checkpoint on the held-out pairs, clean and noisy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask one head as `layer:head`; repeatable.
        #[arg(long = "mask-head", value_parser = parse_pair, value_name = "L:H")]
        mask_head: Vec<(usize, usize)>,
        /// Test-time noise as `stddev[:fraction]`; the fraction must be 1.
        #[arg(long, value_parser = parse_noise, value_name = "SIGMA:FRACTION")]
        noise: Option<(f64, f64)>,
    },
    /// Mask each head position in turn and report the error and quadrant mass.
    AblateHeads {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train one model per layer with Gaussian heads in that layer only.
    AblateLayers {
        #[command(flatten)]
        common: Common,
        /// Gaussian heads in the chosen layer; defaults to the config's count per layer or 4.
        #[arg(long)]
        gaussian: Option<usize>,
    },
    /// Dump one head's attention matrix and one query row as CSV.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-set shape indices as `i:j`.
        #[arg(long, value_parser = parse_pair, default_value = "0:1", value_name = "I:J")]
        pair: (usize, usize),
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Query token whose row is exported.
        #[arg(long, default_value_t = 0)]
        point: usize,
    },
    /// Print the resolved config, parameter count and head layout.
    InspectConfig {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::AblateHeads { .. } => "ablate-heads",
            Command::AblateLayers { .. } => "ablate-layers",
            Command::ExportAttn { .. } => "export-attn",
            Command::InspectConfig { .. } => "inspect-config",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::AblateHeads { common, .. }
            | Command::AblateLayers { common, .. }
            | Command::ExportAttn { common, .. }
            | Command::InspectConfig { common } => common,
        }
    }
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected A:B, got `{s}`"))?;
    let a = a.trim().parse().map_err(|e| format!("`{a}`: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("`{b}`: {e}"))?;
    Ok((a, b))
}

fn parse_noise(s: &str) -> Result<(f64, f64), String> {
    let (sigma, fraction) = match s.split_once(':') {
        Some((a, b)) => (a, b),
        None => (s, "1"),
    };
    let sigma: f64 = sigma.trim().parse().map_err(|e| format!("`{sigma}`: {e}"))?;
    let fraction: f64 = fraction.trim().parse().map_err(|e| format!("`{fraction}`: {e}"))?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(format!("noise stddev must be finite and non-negative, got {sigma}"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(format!("noise fraction must lie in [0, 1], got {fraction}"));
    }
    Ok((sigma, fraction))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
