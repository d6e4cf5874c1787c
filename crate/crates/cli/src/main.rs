//! `plin`: intermediate LiDAR frame interpolation from the command line.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "plin", version, about = "Interpolate an intermediate depth frame between two sparse LiDAR depth maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Derive the flows from the missing middle frame to both neighbors.
    FlowMid {
        /// Flow from the previous to the next frame (.flo).
        forward: PathBuf,
        /// Flow from the next to the previous frame (.flo).
        backward: PathBuf,
        /// Directory receiving flow_to_prev.flo and flow_to_next.flo.
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate the intermediate depth map.
    Interpolate(InterpolateArgs),
    /// Back-project a depth map into a PLY point cloud.
    Convert {
        depth: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the cascade on a dataset manifest.
    Train(TrainArgs),
    /// Compare predictions with ground truth and print metrics as CSV.
    Eval {
        /// Predicted depth PNG, or a directory of them.
        pred: PathBuf,
        /// Ground truth PNG, or a directory with the same relative layout.
        gt: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic dataset from a TOML description.
    Synth {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the description.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
struct InterpolateArgs {
    d_prev: PathBuf,
    d_next: PathBuf,
    /// Forward cross-frame flow, or the flow to the previous frame with
    /// `--intermediate`.
    flow_a: PathBuf,
    /// Backward cross-frame flow, or the flow to the next frame with
    /// `--intermediate`.
    flow_b: PathBuf,
    /// The flows are already anchored at the middle frame (as written by
    /// `flow-mid`).
    #[arg(long)]
    intermediate: bool,
    /// Color image of the middle frame; required by the network.
    #[arg(long)]
    color: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Emit the warp-fused depth without the network.
    #[arg(long)]
    classical: bool,
    /// Weight of the previous frame in the fusion.
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Also write the point cloud next to the output, with a .ply extension.
    #[arg(long)]
    ply: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    manifest: PathBuf,
    /// Network description (TOML with [coarse] and [refine] tables).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from this checkpoint instead of a fresh network.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total epochs, including any already done by a resumed checkpoint.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Refine stage predicts a correction to the coarse depth.
    #[arg(long)]
    residual: bool,
    /// Disable random horizontal flips.
    #[arg(long)]
    no_flip: bool,
    /// Loss trace CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn thread_pool() -> error::Result<()> {
    let Ok(raw) = std::env::var("PLIN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PLIN_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> error::Result<()> {
    thread_pool()?;
    match cli.command {
        Command::FlowMid { forward, backward, out } => commands::flow_mid(&forward, &backward, &out),
        Command::Interpolate(a) => commands::interpolate(&a),
        Command::Convert { depth, intrinsics, out } => commands::convert(&depth, &intrinsics, &out),
        Command::Train(a) => commands::train(&a),
        Command::Eval { pred, gt, out } => commands::eval(&pred, &gt, out.as_deref()),
        Command::Synth { config, out, seed } => commands::synth(&config, &out, seed),
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("plin: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
