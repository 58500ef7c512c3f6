//! Command-line front end: training, evaluation, prediction overlays and
//! synthetic fixture generation.

pub mod commands;
pub mod config;
pub mod overlay;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;

pub use commands::{
    cmd_evaluate, cmd_make_fixtures, cmd_predict, cmd_train, env_output_root, evaluation_report, run, Cli, Command,
};
pub use config::{RunConfig, CONFIG_ECHO, OUTPUT_ROOT_ENV};

/// Parses `args`, runs the command and maps the outcome to an exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli, env_output_root().as_deref()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
