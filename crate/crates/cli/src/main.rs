use clap::{Parser, Subcommand};

use nerf_poison_cli::commands::{self, EvalArgs, PoisonArgs, SynthArgs, TrainArgs};
use nerf_poison_cli::report::{self, ReportArgs};
use nerf_poison_cli::CliError;

/// Radiance-field training-data poisoning by bounded spatial deformation.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error,
/// 4 numeric divergence.
#[derive(Debug, Parser)]
#[command(name = "nerf-poison", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset from a primitive scene spec.
    Synth(SynthArgs),
    /// Train a radiance field on a dataset.
    Train(TrainArgs),
    /// Optimize bounded flow fields that poison a dataset.
    Poison(PoisonArgs),
    /// Render a checkpoint at a dataset's cameras and score it.
    Eval(EvalArgs),
    /// Chart PSNR against perturbation strength from metrics tables.
    Report(ReportArgs),
}

fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Poison(a) => commands::poison(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => report::report(a),
    }
}

/// Keeps freed training buffers in the heap. Each optimizer step allocates
/// and frees buffers of the same sizes; returning them to the kernel every
/// time made page faults a large share of the run time.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    const MIB: libc::c_int = 1 << 20;
    // SAFETY: mallopt only adjusts allocator parameters and is called
    // before any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 * MIB);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1024 * MIB);
        libc::mallopt(libc::M_TOP_PAD, 64 * MIB);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

fn main() {
    tune_allocator();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
