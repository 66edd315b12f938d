mod config;
mod run;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use config::{Cli, Command};
use run::CliError;

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("CBSR_THREADS") else {
        return Ok(());
    };
    let n: usize = match v.trim().parse() {
        Ok(n) if n >= 1 => n,
        _ => return Err(CliError::Config(format!("CBSR_THREADS must be a positive integer, got `{v}`"))),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Config(e.to_string().trim_end().to_string());
            run::report_error("", &err);
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    let name = cli.command.name();
    let result = init_threads().and_then(|_| match &cli.command {
        Command::Fit(a) => run::cmd_fit(a),
        Command::Weights(a) => run::cmd_weights(a),
        Command::Diagnose(a) => run::cmd_diagnose(a),
        Command::Estimate(a) => run::cmd_estimate(a),
        Command::Simulate(a) => run::cmd_simulate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            run::report_error(name, &err);
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
