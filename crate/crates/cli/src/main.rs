use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::CliError;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "cemdg", version, about = "Multiscale DG wave propagation in heterogeneous media")]
struct Cli {
    /// Worker threads for the per-block solves (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the test and trial bases and save them with the block eigenvalues.
    Bases {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the coarse leapfrog scheme and write the final field and energy trace.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Reuse a basis written by `bases` instead of rebuilding it.
        #[arg(long)]
        from_basis: Option<PathBuf>,
        /// Run even when the time step exceeds the stability estimate.
        #[arg(long)]
        allow_unstable: bool,
    },
    /// Compare against the fine reference over several coarse sizes.
    Convergence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        allow_unstable: bool,
    },
    /// Measure localization error of the trial functions against the global basis.
    Decay {
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert a field file to legacy VTK structured points (or raw dofs with --raw).
    ExportField {
        field: PathBuf,
        /// Output path; stdout when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Emit every DG dof instead of node averages.
        #[arg(long)]
        raw: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let load = |p: &PathBuf| ExperimentConfig::load(p).map_err(CliError::from);
    match cli.command {
        Command::Bases { config } => commands::cmd_bases(&load(&config)?),
        Command::Solve {
            config,
            from_basis,
            allow_unstable,
        } => commands::cmd_solve(&load(&config)?, from_basis.as_deref(), allow_unstable),
        Command::Convergence { config, allow_unstable } => commands::cmd_convergence(&load(&config)?, allow_unstable),
        Command::Decay { config } => commands::cmd_decay(&load(&config)?),
        Command::ExportField { field, output, raw } => commands::cmd_export_field(&field, output.as_ref(), raw),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cemdg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
