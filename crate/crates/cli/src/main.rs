mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(commands::EXIT_USAGE as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure threads: {e}");
            return ExitCode::from(commands::EXIT_USAGE as u8);
        }
    }
    let result = match &cli.command {
        Command::Train(c) => commands::train(c),
        Command::Eval(c) => commands::eval(c),
        Command::Sweep(c) => commands::sweep(c),
        Command::CompareMixup(c) => commands::compare(c),
        Command::MixupPreview(c) => commands::preview(c),
        Command::Gradcheck(c) => commands::gradcheck(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
