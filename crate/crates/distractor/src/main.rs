//! Command-line entry point for the distractor toolkit.

use clap::Parser;

mod cli;

use cli::Cli;

fn main() {
    let parsed = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = cli::run(parsed) {
        // Library error messages already spell out their causes.
        eprintln!("error: {}", err.error);
        std::process::exit(err.code);
    }
}
