//! Command-line frontend: synthesize scenes, estimate depth, fuse point
//! clouds, evaluate, gradient-check the transport loss, and benchmark.
//!
//! Every run writes a `manifest.txt` capturing its exact configuration.
//! Failures print one machine-parsable line to stderr and remove partial
//! outputs.

mod commands;
mod util;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mvs",
    version,
    about = "Multi-view stereo depth estimation engine"
)]
struct Cli {
    /// Worker threads (default: MVS_THREADS env var, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene to images, ground-truth depths and cameras.
    Synth(commands::SynthArgs),
    /// Run the cascade depth estimation pipeline on a scene directory.
    Estimate(commands::EstimateArgs),
    /// Filter per-view depth maps and fuse them into a PLY point cloud.
    Fuse(commands::FuseArgs),
    /// Depth-map or point-cloud metrics between two artifacts.
    Eval(commands::EvalArgs),
    /// Finite-difference check of the transport-loss gradient.
    Gradcheck(commands::GradcheckArgs),
    /// Time each pipeline stage over repeated runs.
    Bench(commands::BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("MVS_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .filter(|&t| t > 0);

    let run = || match cli.command {
        Command::Synth(args) => commands::synth(&args),
        Command::Estimate(args) => commands::estimate(&args, threads),
        Command::Fuse(args) => commands::fuse(&args, threads),
        Command::Eval(args) => commands::eval(&args),
        Command::Gradcheck(args) => commands::gradcheck(&args),
        Command::Bench(args) => commands::bench(&args, threads),
    };

    let result = {
        #[cfg(feature = "parallel")]
        {
            match threads {
                Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
                    Ok(pool) => pool.install(run),
                    Err(e) => Err(anyhow::anyhow!("failed to build thread pool: {e}")),
                },
                None => run(),
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            run()
        }
    };

    match result {
        Ok(code) => code,
        Err(e) => {
            // Single-line machine-parsable error.
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

pub(crate) fn ensure_dir(path: &PathBuf) -> anyhow::Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| anyhow::anyhow!("cannot create output dir {}: {e}", path.display()))
}
