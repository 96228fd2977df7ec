//! `splitfc` command-line front end: training runs and sweeps, standalone
//! codec runs and allocator queries. Results go to CSV/JSON files; failures
//! go to stderr as one JSON object.

mod allocate;
mod codec;
mod error;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "splitfc", version, about = "Adaptive feature-wise compression for split learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run split training and write a trace CSV plus a summary JSON.
    Train(train::TrainArgs),
    /// Compress a matrix file, write the `.sfc` payload and codec stats.
    Codec(codec::CodecArgs),
    /// Solve a level-allocation problem given as JSON.
    Allocate(allocate::AllocateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => train::run(args),
        Command::Codec(args) => codec::run(args),
        Command::Allocate(args) => allocate::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}

/// Pretty JSON to a file, or to stdout when no path is given.
pub(crate) fn emit_json(value: &serde_json::Value, path: Option<&std::path::Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values always serialize");
    match path {
        Some(p) => write_file(p, format!("{text}\n").as_bytes()),
        None => {
            use std::io::Write;
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            Ok(())
        }
    }
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
