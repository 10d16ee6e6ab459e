//! `coagsim` command-line front end.
//!
//! Exit status: 0 when every selected certificate passes or is inapplicable,
//! 2 when one fails, 1 on any execution error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coagsim::config::{load_config, SolverKind};
use coagsim::diagnostics::{Certificate, Status};
use coagsim::runner::{self, EXIT_CERT_FAIL, EXIT_ERROR, EXIT_OK};
use coagsim::Result;

#[derive(Parser)]
#[command(name = "coagsim", version, about = "Multicomponent coagulation solvers and certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config: solver, certificates, artifacts.
    Run {
        config: PathBuf,
        /// Output directory (defaults to the config's `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit a kernel against its declared envelope and print the report as JSON.
    ValidateKernel {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        /// Random pairs on top of the log grid.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-evaluate certificates on a finished run directory.
    Diagnose {
        dir: PathBuf,
        /// Comma-separated certificate names.
        #[arg(long, value_delimiter = ',')]
        certs: Option<Vec<String>>,
    },
    /// Run a config whose solver is the Monte Carlo ensemble.
    Mc {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config once per value of a dotted parameter path.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
}

fn print_certs(certs: &[Certificate]) {
    for c in certs {
        let verdict = match c.verdict {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Inapplicable => "inapplicable",
        };
        match &c.reason {
            Some(r) => println!("{:<40} {verdict:<13} {r}", c.name),
            None => println!("{:<40} {verdict:<13} slack {:.3e}", c.name, c.slack),
        }
    }
}

fn run_config(config: &std::path::Path, out: Option<&std::path::Path>, require_mc: bool) -> Result<i32> {
    let parsed = load_config(config)?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    if require_mc && parsed.config.solver.kind() != Some(SolverKind::MonteCarlo) {
        return Err(coagsim::CoagError::Config("`mc` needs a config with a `montecarlo` solver block".into()));
    }
    let outcome = runner::run_file(config, out)?;
    print_certs(&outcome.certificates);
    if let Some(rep) = &outcome.comparison {
        println!("max |z| against deterministic reference: {:.3}", rep.max_abs_z);
    }
    Ok(outcome.exit_code)
}

fn dispatch(cli: Cli) -> Result<i32> {
    runner::configure_threads()?;
    match cli.command {
        Command::Run { config, out } => run_config(&config, out.as_deref(), false),
        Command::Mc { config, out } => run_config(&config, out.as_deref(), true),
        Command::ValidateKernel { config, dim, samples, seed } => {
            let text = std::fs::read_to_string(&config)?;
            let report = runner::validate_kernel(&text, dim, samples, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.pass { EXIT_OK } else { EXIT_CERT_FAIL })
        }
        Command::Diagnose { dir, certs } => {
            let (certs, code) = runner::diagnose(&dir, certs.as_deref())?;
            print_certs(&certs);
            Ok(code)
        }
        Command::Sweep { config, param, values, out } => {
            let (rows, code) = runner::sweep(&config, &param, &values, &out)?;
            for r in &rows {
                match &r.error {
                    Some(e) => println!("{param}={} exit {} error: {e}", r.value, r.exit_code),
                    None => println!("{param}={} exit {} pass {} fail {}", r.value, r.exit_code, r.passed, r.failed),
                }
            }
            Ok(code)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    };
    ExitCode::from(code as u8)
}
