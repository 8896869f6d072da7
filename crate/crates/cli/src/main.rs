mod cli;
mod commands;
mod config;
mod failure;
mod rundir;

use clap::Parser;

fn main() {
    let cli = cli::Cli::parse();
    if let Err(failure) = commands::run(cli) {
        eprintln!("psgtool: {failure}");
        std::process::exit(failure.code);
    }
}
