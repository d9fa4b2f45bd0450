mod args;
mod commands;

use clap::Parser;

use args::{Cli, Command};

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure {threads} threads: {e}");
            std::process::exit(1);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Graph(a) => commands::graph(a),
        Command::Run(a) => commands::run(a),
        Command::Ci(a) => commands::ci(a),
        Command::Consistency(a) => commands::consistency(a),
        Command::Replay(a) => commands::replay(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
