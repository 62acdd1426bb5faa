mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub const DEFAULT_SEED: u64 = 1729;

#[derive(Parser, Debug)]
#[command(name = "qfif", version, about = "Quantum Fisher information of emitted light from source dynamics")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Worker threads.
    #[arg(long, global = true, env = "QFIF_THREADS", value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ModelArgs {
    /// Named source model.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Preset parameter `key=value`; repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE", requires = "preset")]
    pub params: Vec<String>,
    /// JSON model file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Identical,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Q2,
    Norm,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// QFI of the emitted field.
    Qfi {
        #[command(flatten)]
        model: ModelArgs,
        /// Quadrature points; must divide the step count.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// QFI over a range of one preset parameter, given as `a..b`, `a..b:n` or `x,y,z`.
    Scan {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        grid: Option<usize>,
        /// Fit summary JSON; defaults to `<out>.summary.json`, else stderr.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Two-time correlators and photon flux on a time grid.
    Correlators {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Liouvillian spectrum and scaling classification.
    Spectrum {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = qfif_core::linalg::tol::FIXED_POINT)]
        tol: f64,
        #[arg(long, default_value_t = qfif_core::linalg::tol::GAP_FLOOR)]
        gap_floor: f64,
    },
    /// Time-bin matrix-product state of the emission.
    Mps {
        #[command(flatten)]
        model: ModelArgs,
        /// Bin width; defaults to the model step.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Writes the sequential generation circuit to this file.
        #[arg(long)]
        emit_circuit: Option<PathBuf>,
    },
    /// Multi-start maximization of Q2 over source Hamiltonians.
    Optimize {
        #[arg(long)]
        structure: String,
        #[arg(long = "T")]
        horizon: f64,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        init_scale: Option<f64>,
        /// Histogram of final values as CSV.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Adjoint gradient against central finite differences.
    GradCheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = Objective::Q2)]
        objective: Objective,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
    /// Measurement optimality checks.
    #[command(group = clap::ArgGroup::new("task").required(true))]
    Measure {
        /// Photon-number support file.
        #[arg(long, group = "task")]
        check: Option<PathBuf>,
        /// Entangled two-photon state evading the number-measurement condition.
        #[arg(long, group = "task")]
        counterexample: bool,
        /// Controllability of the blockade source with at most `D` photons per mode.
        #[arg(long, group = "task", value_name = "D")]
        lie_closure: Option<usize>,
    },
    /// Agreement of the correlator route with the explicit state vector.
    OracleCheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprint!("{}", output::pretty(&f.diagnostic()));
            ExitCode::from(f.code())
        }
    }
}
