use std::process::ExitCode;

use clap::Parser;
use slora::error::{EXIT_CONFIG, EXIT_OK};
use slora::{execute, summary, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are config errors; help and version are not errors
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK } as u8);
        }
    };
    let (command, args) = cli.command.split();
    match execute(command, args) {
        Ok(outcome) => {
            print!("{}", summary(&outcome));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
