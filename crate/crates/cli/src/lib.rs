//! The `grkan` command-line tool.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod rss;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

pub use commands::{Cli, Command};
pub use error::{CliError, Result};

/// Parses `args` and runs the command; returns the process exit code.
///
/// Everything except `bench` runs on a single-thread pool so results do not
/// depend on the machine.
pub fn run<I, S>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return 1;
            }
            let _ = write!(stdout, "{e}");
            return 0;
        }
    };
    let result = if matches!(cli.command, Command::Bench(_)) {
        commands::execute(cli, stdout, stderr)
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => pool.install(|| commands::execute(cli, stdout, stderr)),
            Err(e) => Err(CliError::Usage(format!("thread pool: {e}"))),
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
