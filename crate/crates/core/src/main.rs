use clap::Parser;

use xmodal::cli::{run, Cli};

/// Exit codes: 0 success, 1 validation error, 2 runtime failure.
fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not errors
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(if e.is_validation() { 1 } else { 2 });
    }
}
