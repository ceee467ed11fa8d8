//! `icae`: single entry point for the compression workflow — pretraining,
//! instruct fine-tuning, encoding contexts to slot files, restoration /
//! continuation / prompted responses, restoration evaluation, memory-length
//! sweeps, triple generation, pairwise judging, and verdict tallies.

mod commands;
mod config;

use clap::Parser;

fn main() {
    let cli = match config::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                // clap's message already names the offending flag
                eprint!("{e}");
                std::process::exit(1);
            }
            // --help / --version go to stdout with exit 0
            print!("{e}");
            std::process::exit(0);
        }
    };
    match commands::run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}
