use std::io;

use clap::Parser;
use timewarp_lab::cli::{self, Cli, Command};

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_writer(io::stderr).init();
    let cli = Cli::parse();
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Run(args) => cli::run(&args, &mut stdout),
        Command::Compare(args) => cli::compare(&args, &mut stdout),
        Command::ExportGraph(args) => cli::export_graph(&args, &mut stdout),
        Command::Serve(args) => {
            drop(stdout);
            tokio::runtime::Runtime::new()?.block_on(cli::serve(&args))
        }
    }
}
