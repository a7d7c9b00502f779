use clap::Parser;
use lmser_cli::{run, Command};

/// Lmser bidirectional network experiments on MNIST.
#[derive(Parser)]
#[command(name = "lmser", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
