use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dimer_cli::config::{parse_config, CommandKind, Overrides};

#[derive(Parser)]
#[command(name = "dimer", version, about = "Open Bose-Hubbard dimer: trajectories, statistics and mean-field sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Mean-field continuation, bifurcations and limit cycles over the drive.
    Sweep(Common),
    /// One quantum trajectory.
    Trajectory(Common),
    /// Seeded ensemble of trajectories with mean photon numbers.
    Ensemble(Common),
    /// One trajectory under a linear drive ramp.
    Ramp(Common),
    /// Histograms, spectra and switching counts from trajectories.
    Stats(Common),
    /// Time-averaged g2 and entanglement entropy over a drive grid.
    Indicators(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file (a run manifest also works).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Figure recipe: fig1, fig1b, fig2 ... fig10.
    #[arg(long)]
    preset: Option<String>,
    /// Base seed; trajectory k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for ensembles.
    #[arg(long, env = "DIMER_THREADS")]
    threads: Option<usize>,
    /// Allow runs with mu >= 10.
    #[arg(long)]
    heavy: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match cli.command {
        Cmd::Sweep(c) => (CommandKind::Sweep, c),
        Cmd::Trajectory(c) => (CommandKind::Trajectory, c),
        Cmd::Ensemble(c) => (CommandKind::Ensemble, c),
        Cmd::Ramp(c) => (CommandKind::Ramp, c),
        Cmd::Stats(c) => (CommandKind::Stats, c),
        Cmd::Indicators(c) => (CommandKind::Indicators, c),
    };
    let overrides = Overrides { seed: common.seed, out: common.out, threads: common.threads, heavy: common.heavy };
    let cfg = match parse_config(kind, common.preset.as_deref(), common.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dimer_cli::run(&cfg, overrides.applied()) {
        Ok(m) => {
            eprintln!(
                "{}: {} outputs in {} ({:.1} s)",
                m.command,
                m.outputs.len(),
                cfg.out.display(),
                m.wall_clock_s.unwrap_or(0.0)
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
