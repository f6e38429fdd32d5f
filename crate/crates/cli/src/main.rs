use std::process::ExitCode;

use clap::Parser;
use vmfcal_cli::{run, Cli};

const LOG_ENV: &str = "VMF_LOG_LEVEL";

fn init_logging() {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "warn".into());
    let known = ["error", "warn", "info", "debug"].contains(&level.as_str());
    env_logger::Builder::new()
        .parse_filters(if known { &level } else { "warn" })
        .format_timestamp(None)
        .init();
    if !known {
        log::warn!("{LOG_ENV}={level:?} is not one of error, warn, info, debug; using warn");
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vmfcal: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
