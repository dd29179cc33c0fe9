use clap::Parser;
use std::process;

use privfilter_cli::args::Cli;
use privfilter_cli::commands;

fn main() {
    let cli = Cli::parse();
    if let Err(err) = commands::run(cli) {
        eprintln!("error: {err}");
        process::exit(err.exit_code());
    }
}
