//! `afa`: data generation, training, prediction and inspection for AFA-PredNet.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] afa_core::Error),
}

impl CliError {
    /// 1 for validation problems, 2 for I/O and file-format problems.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) | CliError::Core(afa_core::Error::Io { .. } | afa_core::Error::Format { .. }) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "afa", version, about = "Action-modulated predictive coding network (AFA-PredNet)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the moving-pixel world: one sequence per start cell and direction.
    GenMinworld(GenMinworldArgs),
    /// Simulate the line-tracer robot and record camera frames with wheel speeds.
    GenLinetracer(GenLinetracerArgs),
    /// Train a network on an AFAP dataset and write an AFAC checkpoint.
    Train(TrainArgs),
    /// Write every one-step-ahead prediction as a PGM image.
    Predict(PredictArgs),
    /// Report prediction error against the copy-last-frame baseline.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences on a random instance.
    Gradcheck(GradcheckArgs),
    /// Dump generative-unit activations, attention weights and R for one sequence.
    DumpGu(DumpGuArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// key=value file; flags given on the command line take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenMinworldArgs {
    #[command(flatten)]
    common: Common,
    /// Output AFAP file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Frame height [default: 8].
    #[arg(long)]
    height: Option<usize>,
    /// Frame width [default: 12].
    #[arg(long)]
    width: Option<usize>,
    /// Frames per sequence [default: 12].
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated motions out of right, down [default: right,down].
    #[arg(long)]
    directions: Option<String>,
}

#[derive(Debug, Args)]
struct GenLinetracerArgs {
    #[command(flatten)]
    common: Common,
    /// Output AFAP file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Simulation steps of 0.02 s [default: 5000].
    #[arg(long)]
    steps: Option<usize>,
    /// Frames per sequence [default: 20].
    #[arg(long)]
    sequence_len: Option<usize>,
    /// Camera rows [default: 8].
    #[arg(long)]
    rows: Option<usize>,
    /// Camera columns [default: 12].
    #[arg(long)]
    cols: Option<usize>,
    /// Forward speed in m/s [default: 0.25].
    #[arg(long)]
    speed: Option<f64>,
    /// Steering gain [default: 200].
    #[arg(long)]
    gain: Option<f64>,
    /// Standard deviation of the turn-rate jitter in rad/s [default: 4].
    #[arg(long)]
    noise: Option<f64>,
    /// Random seed (falls back to AFA_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training AFAP file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output AFAC checkpoint [default: model.afac].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Number of layers [default: 2].
    #[arg(long)]
    layers: Option<usize>,
    /// Generative units per layer [default: 2].
    #[arg(long)]
    gu: Option<usize>,
    /// Hidden units of the action MLP [default: 4].
    #[arg(long)]
    mlp_hidden: Option<usize>,
    /// Comma-separated R channels per layer [default: 8,16,32,...].
    #[arg(long)]
    r_channels: Option<String>,
    /// Comma-separated target channels per layer, first equal to the image channels [default: C,8,16,...].
    #[arg(long)]
    target_channels: Option<String>,
    /// Convolution padding: zeros or circular [default: zeros].
    #[arg(long)]
    padding_mode: Option<String>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Iteration budget; one iteration is one sequence [default: 100000].
    #[arg(long)]
    iters: Option<usize>,
    /// Stop once an iteration's loss is at or below this value.
    #[arg(long)]
    threshold: Option<f64>,
    /// Comma-separated per-layer loss weights [default: 1,0.1].
    #[arg(long)]
    layer_weights: Option<String>,
    /// Comma-separated per-step loss weights; later steps weigh 1 [default: 0].
    #[arg(long)]
    time_weights: Option<String>,
    /// Error norm: mean or mean_square [default: mean].
    #[arg(long)]
    error_norm: Option<String>,
    /// Adam first-moment decay [default: 0.9].
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam second-moment decay [default: 0.999].
    #[arg(long)]
    beta2: Option<f64>,
    /// Adam epsilon [default: 1e-8].
    #[arg(long)]
    epsilon: Option<f64>,
    /// Backward slope of the prediction ReLU below zero; 0 is the exact gradient [default: 0].
    #[arg(long)]
    prediction_slope: Option<f64>,
    /// Print the mean loss every N iterations [default: 1000].
    #[arg(long)]
    log_every: Option<usize>,
    /// Write every iteration's loss to this TSV file.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Random seed for initialisation and sequence order (falls back to AFA_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// AFAC checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// AFAP dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for seq{S}_t{T}.pgm files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// AFAC checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// AFAP dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write per-sequence MSE and baseline MSE to this TSV file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also report argmax accuracy from this step on (single-pixel data only).
    #[arg(long)]
    accuracy_from: Option<usize>,
    /// Also run the right/down action-swap probe (single-pixel data, 2-d actions).
    #[arg(long)]
    probe: bool,
    /// Evaluate with the action MLP forced to uniform attention.
    #[arg(long)]
    uniform: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Number of layers [default: 1].
    #[arg(long)]
    layers: Option<usize>,
    /// Frame height [default: 4].
    #[arg(long)]
    height: Option<usize>,
    /// Frame width [default: 4].
    #[arg(long)]
    width: Option<usize>,
    /// Sequence length [default: 3].
    #[arg(long)]
    steps: Option<usize>,
    /// Generative units per layer [default: 2].
    #[arg(long)]
    gu: Option<usize>,
    /// Finite-difference step [default: 1e-5].
    #[arg(long)]
    eps: Option<f64>,
    /// Largest accepted relative error [default: 1e-4].
    #[arg(long)]
    tol: Option<f64>,
    /// Entries checked per tensor, 0 for all [default: 12].
    #[arg(long)]
    samples: Option<usize>,
    /// Random seed for the instance (falls back to AFA_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DumpGuArgs {
    #[command(flatten)]
    common: Common,
    /// AFAC checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// AFAP dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Index of the sequence to run [default: 0].
    #[arg(long)]
    sequence: Option<usize>,
    /// Layer whose bank is dumped [default: 0].
    #[arg(long)]
    layer: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
