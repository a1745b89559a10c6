mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;

const DEVICE_VAR: &str = "PHYSDIFF_DEVICE";

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<physdiff_core::Error> for Failure {
    fn from(e: physdiff_core::Error) -> Self {
        match e {
            physdiff_core::Error::Config(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn check_device() -> Result<(), Failure> {
    match std::env::var(DEVICE_VAR) {
        Err(_) => Ok(()),
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(v) => {
            Err(Failure::Runtime(anyhow::anyhow!("{DEVICE_VAR}={v}: only the cpu device is available in this build")))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "warn"
    } else {
        "info"
    }))
    .format_timestamp(None)
    .init();
    let result = check_device().and_then(|_| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
