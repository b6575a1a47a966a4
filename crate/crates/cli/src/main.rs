use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fwlab::experiment::{self, RunError, RunOptions};

/// Small-noise large-deviation experiments on diffusions.
#[derive(Parser)]
#[command(name = "fwlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the task of an experiment file and write its artifacts.
    Run {
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; falls back to FWLAB_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print summary tables over finished run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Check the model block of an experiment file against the standing
    /// assumptions and print the report as JSON.
    CheckModel { config: PathBuf },
}

fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn fail(e: &RunError) -> ExitCode {
    eprintln!("fwlab: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            threads,
        } => {
            let opts = RunOptions { seed, out, threads };
            match experiment::run(&config, &opts) {
                Ok(outcome) => {
                    let mut text: String = outcome.summary.iter().map(|l| format!("{l}\n")).collect();
                    text.push_str(&format!("wrote {} files to {}\n", outcome.files.len(), outcome.dir.display()));
                    emit(&text);
                    match &outcome.error {
                        Some(e) => fail(e),
                        None => ExitCode::SUCCESS,
                    }
                }
                Err(e) => fail(&e),
            }
        }
        Command::Report { dirs } => match experiment::report(&dirs) {
            Ok(text) => {
                emit(&text);
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::CheckModel { config } => match experiment::check_model_file(&config) {
            Ok((json, verdict)) => {
                emit(&format!("{json}\n"));
                eprintln!("verdict: {verdict:?}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
    }
}
