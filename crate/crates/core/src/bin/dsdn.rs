use std::process::ExitCode;

use clap::Parser;
use dsdn::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSDN_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, category) = exit_code(&err);
            eprintln!("error[{category}]: {err:#}");
            ExitCode::from(code)
        }
    }
}
