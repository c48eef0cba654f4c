//! Command-line entry points for every pipeline stage and the labeling
//! service.

pub mod commands;
pub mod config;
pub mod error;
pub mod plots;
pub mod run;
pub mod service;

use clap::Parser;

pub use commands::Cli;
pub use error::{CliError, CliResult};

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 on bad input, 2 on internal error.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
