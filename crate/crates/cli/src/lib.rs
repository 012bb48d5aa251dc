pub mod args;
pub mod artifacts;
pub mod commands;
pub mod error;
pub mod presets;

use std::ffi::OsString;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::error::{CliError, CliResult, EXIT_CONFIG, EXIT_OK};

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("R2DL_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::config(format!(
            "R2DL_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    // A pool may already exist when run is called more than once in a process.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn dispatch(command: &Command) -> CliResult<()> {
    match command {
        Command::Train(a) => commands::cmd_train(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Sweep(a) => commands::cmd_sweep(a),
        Command::Distances(a) => commands::cmd_distances(a),
        Command::ExportEmbeddings(a) => commands::cmd_export_embeddings(a),
        Command::InspectTheta(a) => commands::cmd_inspect_theta(a),
        Command::Synth(a) => commands::cmd_synth(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match configure_threads().and_then(|()| dispatch(&cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
