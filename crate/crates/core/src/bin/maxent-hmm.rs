use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use maxent_hmm::cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let mut stderr = std::io::stderr();
    match execute(cli.command, &mut stdout, &mut stderr) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = stdout.flush();
            let _ = writeln!(stderr, "error: {e}");
            ExitCode::FAILURE
        }
    }
}
