//! `flowsr`: train and evaluate latent-space super-resolution models built
//! on coupling flow matching, with diffusion and regression baselines.

mod commands;
mod config;
mod png_out;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::GlobalArgs;

#[derive(Parser)]
#[command(
    name = "flowsr",
    about = "Latent super-resolution via coupling flow matching",
    version
)]
struct Cli {
    /// Key-value config file (`key = value` lines, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the command's primary seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded dataset: tensor files plus a JSON-lines manifest.
    GenData,
    /// Train the configured model kind; writes checkpoint.fmbc and loss.csv.
    Train,
    /// Run the two-stage pipeline (prior, then upsampler) and write PNGs.
    Sample,
    /// Decode solver snapshots along the trajectory into image strips.
    Trajectory,
    /// Evaluate a checkpoint against held-out data; writes metrics.csv.
    Eval,
    /// Sweep one axis (t_aug, nfe, upsample_method); writes ablation.csv.
    Ablate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = GlobalArgs {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        force: cli.force,
    };
    let result = match cli.command {
        Command::GenData => commands::cmd_gen_data(&args),
        Command::Train => commands::cmd_train(&args),
        Command::Sample => commands::cmd_sample(&args),
        Command::Trajectory => commands::cmd_trajectory(&args),
        Command::Eval => commands::cmd_eval(&args),
        Command::Ablate => commands::cmd_ablate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
