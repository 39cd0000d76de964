use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use duca_cli::runner::{cmd_bounds, cmd_run, cmd_validate, default_out, CliError};
use duca_cli::{Config, Overrides};
use duca_core::linalg::fmt_f64;

#[derive(Parser)]
#[command(name = "duca", version, about = "Dual consensus solvers for coupled-constraint problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override `run.rounds`.
    #[arg(long)]
    rounds: Option<usize>,
    /// Override both the graph and problem seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "tol-inner")]
    tol_inner: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (variant, alpha) pair and write CSVs plus a manifest.
    Run {
        #[command(flatten)]
        common: Common,
        /// Fail with exit code 4 if any per-round invariant is breached.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check graph, Slater point and settings without running.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Print the 1/k bounds at the given rounds.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
        k: Vec<usize>,
    },
}

fn load(common: &Common) -> Result<Config, CliError> {
    let mut cfg = Config::load(&common.config)?;
    cfg.apply(&Overrides { rounds: common.rounds, seed: common.seed, tol_inner: common.tol_inner })?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common, strict, out } => {
            let cfg = load(&common)?;
            let out = out.unwrap_or_else(default_out);
            let manifest = cmd_run(&cfg, &out, strict)?;
            for r in &manifest.runs {
                println!("{} rounds={} comm={} breaches={}", r.label, r.rounds, r.comm_total, r.breach_count);
            }
            println!("wrote {} (config sha256 {})", out.display(), manifest.config_sha256);
            Ok(())
        }
        Command::Validate { common } => {
            let cfg = load(&common)?;
            let report = cmd_validate(&cfg);
            for line in &report.lines {
                println!("{line}");
            }
            if report.pass {
                Ok(())
            } else {
                Err(CliError::Assumption("validation failed".into()))
            }
        }
        Command::Bounds { common, k } => {
            let cfg = load(&common)?;
            println!("label,k,fe_bound,oe_lower,oe_upper");
            for r in cmd_bounds(&cfg, &k)? {
                println!("{},{},{},{},{}", r.label, r.k, fmt_f64(r.fe_bound), fmt_f64(r.oe_lower), fmt_f64(r.oe_upper));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
