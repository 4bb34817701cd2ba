use clap::Parser;
use textalign_cli::cli::{execute, Cli};
use textalign_cli::run::DefaultProviders;

fn main() {
    let cli = Cli::parse();
    let code = execute(&cli, &DefaultProviders, &mut std::io::stdout().lock());
    std::process::exit(code);
}
