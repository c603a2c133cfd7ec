mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::Parser;

use config::{Cli, Command, ExperimentConfig, Format};
use output::{error_json, exit_code, report, write_atomic, EXIT_OK, EXIT_VERIFICATION};

fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(run(&cli))
}

fn run(cli: &Cli) -> u8 {
    let args = &cli.common;
    let cmd = cli.command;
    let default_tol = match cmd {
        Command::Moser => 1e-5,
        Command::Counterexample => 1e-3,
        Command::Odelimit => 1e-8,
        Command::Loop => 1e-6,
    };
    let tol = match args.tol {
        Some(t) if !(t > 0.0 && t.is_finite()) => {
            eprintln!("error: --tol must be positive and finite, got {t}");
            return output::EXIT_INPUT;
        }
        Some(t) => t,
        None => default_tol,
    };
    let mut cfg = ExperimentConfig::new(cmd, args, tol);
    let outcome = match cmd {
        Command::Moser => commands::moser(args, &mut cfg),
        Command::Counterexample => commands::counterexample(args, &mut cfg),
        Command::Odelimit => commands::odelimit(args, &mut cfg),
        Command::Loop => commands::loop_cmd(args, &mut cfg),
    };
    let name = cmd.name();
    match outcome {
        Ok(out) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            for line in &out.summary {
                println!("{line}");
            }
            let status = if out.passed { "ok" } else { "verification_failed" };
            let written = match (args.format, &out.csv) {
                (Format::Csv, Some(csv)) => write_atomic(&args.out, &format!("{name}.csv"), csv),
                _ => write_atomic(
                    &args.out,
                    &format!("{name}.json"),
                    &report(&cfg, status, ("result", out.result), &out.warnings),
                ),
            };
            if let Err(e) = written {
                eprintln!("error: cannot write output: {e}");
                return output::EXIT_INPUT;
            }
            if out.passed {
                EXIT_OK
            } else {
                eprintln!("{name}: verification failed");
                EXIT_VERIFICATION
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            let text = report(&cfg, "error", ("error", error_json(&e)), &[]);
            if let Err(w) = write_atomic(&args.out, &format!("{name}.json"), &text) {
                eprintln!("error: cannot write output: {w}");
            }
            exit_code(&e)
        }
    }
}
