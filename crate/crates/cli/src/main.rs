use clap::error::ErrorKind;
use clap::Parser;

use unitrans_cli::commands::{run, Cli};
use unitrans_cli::{Failure, FailureKind};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            fail(Failure::new(FailureKind::Usage, first.trim_start_matches("error: ")))
        }
    };
    if let Err(f) = run(cli) {
        fail(f)
    }
}

fn fail(f: Failure) -> ! {
    eprintln!("{}", f.line());
    std::process::exit(f.exit_code())
}
