use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use refscan::commands::Context;
use refscan::config::{self, Overrides};
use refscan::CliError;

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  other failure (I/O, corrupt state)
  2  configuration or input error
  3  language backend error
  4  verification error (sandbox, checkout access)
  5  an upstream stage has not been run
  6  the state directory is locked by another process";

#[derive(Parser)]
#[command(name = "refscan", version, about = "Reference-driven vulnerability variant audits", after_help = EXIT_CODES)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    /// Log debug output to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist repository semantics for one checkout
    Profile {
        path: PathBuf,
        #[arg(long)]
        project: String,
        #[arg(long)]
        commit: String,
        /// Re-profile even when a cached profile exists
        #[arg(long)]
        fresh: bool,
    },
    /// Extract vulnerability semantics from a reference advisory document
    ExtractVuln {
        advisory: PathBuf,
        #[arg(long)]
        fresh: bool,
    },
    /// Rank profiled revisions against the reference and pick targets
    Select {
        advisory_id: String,
        #[arg(long)]
        fresh: bool,
    },
    /// Run the inspection loop over the selected targets
    Inspect {
        advisory_id: String,
        /// project@commit; defaults to every selected target
        #[arg(long)]
        target: Option<String>,
        /// Discard persisted inspection memory and start over
        #[arg(long)]
        fresh: bool,
        /// Stop after this many iterations in this invocation; rerun to resume
        #[arg(long)]
        halt_after: Option<u32>,
        /// Static analyzer results (SARIF) made available to the inspector
        #[arg(long)]
        sarif: Option<PathBuf>,
    },
    /// Check candidates statically and, when a sandbox is configured, with PoCs
    Verify {
        advisory_id: String,
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        fresh: bool,
    },
    /// Write the consolidated JSON, markdown and SARIF report
    Report { advisory_id: String },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::load(&cli.overrides)?;
    let mut ctx = Context::new(cfg)?;
    match cli.command {
        Command::Profile {
            path,
            project,
            commit,
            fresh,
        } => ctx.profile(&path, &project, &commit, fresh),
        Command::ExtractVuln { advisory, fresh } => ctx.extract_vuln(&advisory, fresh),
        Command::Select { advisory_id, fresh } => ctx.select(&advisory_id, fresh),
        Command::Inspect {
            advisory_id,
            target,
            fresh,
            halt_after,
            sarif,
        } => ctx.inspect(&advisory_id, target.as_deref(), fresh, halt_after, sarif.as_deref()),
        Command::Verify {
            advisory_id,
            target,
            fresh,
        } => ctx.verify(&advisory_id, target.as_deref(), fresh),
        Command::Report { advisory_id } => ctx.report(&advisory_id),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(if cli.verbose {
            tracing_subscriber::filter::LevelFilter::DEBUG
        } else {
            tracing_subscriber::filter::LevelFilter::WARN
        })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
