use std::io::Write;
use std::process::ExitCode;

use ccc_fiducial_cli::{run, Cli, CliError};
use clap::Parser;

/// Write to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            emit(&format!(
                "{}\n",
                CliError::usage(e.kind().to_string()).to_json()
            ));
            return ExitCode::from(1);
        }
    };
    let to_stdout = cli.out.is_none();
    match run(cli) {
        Ok(out) => {
            if to_stdout {
                emit(&format!("{}\n", out.json));
                if let Some(t) = out.text {
                    eprint!("{t}");
                }
            } else if let Some(t) = out.text {
                emit(&t);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            emit(&format!("{}\n", e.to_json()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
