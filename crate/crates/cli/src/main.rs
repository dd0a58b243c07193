use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use biphoton_cli::config::{parse_bytes, parse_positions};
use biphoton_cli::{cmd_estimate, cmd_run, cmd_sweep, cmd_validate, load_config, CliError, Overrides, Result};
use biphoton_core::ExecMode;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "biphoton", version, about = "Transverse SPDC two-photon simulator")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Memory budget with unit, e.g. 8GB or 512MiB.
    #[arg(long, global = true, value_parser = bytes)]
    memory_budget: Option<u64>,
    /// Directory for the spill cache.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare against closed-form rates and check resolution consistency.
    Validate {
        /// Validation config; the shipped thin_validation.cfg by default.
        config: Option<String>,
    },
    /// Run one experiment.
    Run { config: String },
    /// Distinguishability/visibility sweep over idler positions.
    Sweep {
        config: String,
        /// Lengths `-48um,0um` or a range `start:step:stop`.
        #[arg(long, allow_hyphen_values = true, value_parser = positions)]
        positions: Option<Positions>,
    },
    /// Memory, cache and transform counts for a lattice size.
    Estimate {
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Mode::InCore)]
        mode: Mode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    InCore,
    Spill,
}

fn bytes(s: &str) -> std::result::Result<u64, String> {
    parse_bytes(s).ok_or_else(|| format!("'{s}' is not a byte count with unit (B, MB, GB, MiB, GiB, ...)"))
}

/// Wrapper so clap takes the whole list as one value.
#[derive(Clone)]
struct Positions(Vec<f64>);

fn positions(s: &str) -> std::result::Result<Positions, String> {
    parse_positions(s)
        .map(Positions)
        .ok_or_else(|| format!("'{s}' is not a list of lengths or a start:step:stop range"))
}

fn print<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // a closed pipe (e.g. `| head`) is not an error
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io {
            path: "stdout".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let ov = Overrides {
        threads: cli.threads,
        memory_budget: cli.memory_budget,
        cache_dir: cli.cache_dir,
        out: cli.out,
    };
    let load = |arg: &str| -> Result<_> {
        let mut cfg = load_config(arg)?;
        ov.apply(&mut cfg);
        Ok(cfg)
    };
    match cli.command {
        Command::Validate { config } => {
            let cfg = load(config.as_deref().unwrap_or("thin_validation.cfg"))?;
            let report = cmd_validate(&cfg)?;
            for c in &report.checks {
                println!(
                    "{} {:<48} {:.3e} (limit {:.3e})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.limit
                );
            }
            report.into_result()?;
        }
        Command::Run { config } => {
            let out = cmd_run(&load(&config)?)?;
            print(&out.summary)?;
        }
        Command::Sweep { config, positions } => {
            let s = cmd_sweep(&load(&config)?, positions.map(|p| p.0))?;
            for (y, e) in &s.failures {
                eprintln!("position {:.1} um failed: {e}", y * 1e6);
            }
            match s.best {
                Some((y, v)) => println!("max D²+V² = {v:.4} at {:.1} um ({})", y * 1e6, s.table.display()),
                None => println!("no positions evaluated ({})", s.table.display()),
            }
        }
        Command::Estimate { n, mode } => {
            let mode = match mode {
                Mode::InCore => ExecMode::InCore,
                Mode::Spill => ExecMode::SpillToDisk,
            };
            print(&cmd_estimate(n, mode)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
