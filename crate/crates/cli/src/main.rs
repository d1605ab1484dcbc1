use std::process::ExitCode;

use clap::Parser;

use afn_cli::{run, Cli, SpecMissing};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("afn: {e:#}");
            if e.downcast_ref::<SpecMissing>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
