use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fibersim::cli::{cmd_covariance, cmd_simulate, cmd_trace_check, cmd_verify, format_report};
use fibersim::config::{ModeSpec, SimulationConfig};

#[derive(Parser)]
#[command(
    name = "fibersim",
    version,
    about = "Stochastic clamped-free beam simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides run.N.
    #[arg(long)]
    paths: Option<usize>,
    /// Overrides noise.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the ensemble and write trajectory, observable and statistics CSVs.
    Simulate(Common),
    /// Run the invariant suite; exit status 0 iff every check passes.
    Verify(Common),
    /// Monte Carlo variance of one observable against the Itô quadrature.
    Covariance {
        #[command(flatten)]
        common: Common,
        /// Test function as mode:channel:u|v, e.g. 1:3:u.
        #[arg(long, default_value = "1:3:u")]
        h: ModeSpec,
    },
    /// Trace integral of the stochastic convolution against its bound.
    TraceCheck(Common),
}

fn load(c: &Common) -> fibersim::Result<SimulationConfig> {
    let text = std::fs::read_to_string(&c.config)?;
    let mut cfg = SimulationConfig::parse(&text)?;
    if let Some(n) = c.paths {
        if n == 0 {
            return Err(fibersim::Error::InvalidArgument(
                "--paths must be positive".into(),
            ));
        }
        cfg.n_paths = n;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> fibersim::Result<bool> {
    match cli.command {
        Command::Simulate(c) => {
            let m = cmd_simulate(&load(&c)?, &c.out)?;
            for o in &m.outputs {
                println!("{}", c.out.join(o).display());
            }
            Ok(true)
        }
        Command::Verify(c) => {
            let m = cmd_verify(&load(&c)?, Some(&c.out))?;
            print!("{}", format_report(&m.checks));
            let failed = m.failed_checks();
            if !failed.is_empty() {
                eprintln!("failed checks: {}", failed.join(", "));
            }
            Ok(failed.is_empty())
        }
        Command::Covariance { common, h } => {
            let m = cmd_covariance(&load(&common)?, &h, &common.out)?;
            print!("{}", format_report(&m.checks));
            Ok(m.failed_checks().is_empty())
        }
        Command::TraceCheck(c) => {
            let m = cmd_trace_check(&load(&c)?, &c.out)?;
            print!("{}", format_report(&m.checks));
            Ok(m.failed_checks().is_empty())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
