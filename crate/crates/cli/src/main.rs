use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toplora_cli::{execute, CliError, Command, ConfigFile, Invocation};

#[derive(Parser)]
#[command(name = "toplora", version, about = "Token-wise low-rank adapter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config; sections not present use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the section's seeds with this single seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compare analytic gradients with central finite differences.
    Gradcheck(Common),
    /// Projection-space and gate-dispersion analysis of one adapter.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// TPLW1 weight file to analyze.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Train students on the teacher task.
    Train(Common),
    /// Trainable parameter counts.
    Params(Common),
    /// Train both kinds across ranks and tabulate median losses.
    Sweep(Common),
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let (command, common, weights) = match cli.command {
        Cmd::Gradcheck(c) => (Command::Gradcheck, c, None),
        Cmd::Analyze { common, weights } => (Command::Analyze, common, weights),
        Cmd::Train(c) => (Command::Train, c, None),
        Cmd::Params(c) => (Command::Params, c, None),
        Cmd::Sweep(c) => (Command::Sweep, c, None),
    };
    let config = match &common.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let outcome = execute(&Invocation {
        command,
        config,
        weights,
        seed_override: common.seed_override,
    })?;
    let json = outcome.report.to_json()?;
    match &common.out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{json}").and_then(|_| out.flush()) {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(outcome.exit_code)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("toplora: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
