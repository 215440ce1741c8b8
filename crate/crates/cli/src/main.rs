use clap::Parser;
use dialplan_cli::{execute, Cli};

fn main() -> anyhow::Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    execute(&cli.command, &argv)
}
