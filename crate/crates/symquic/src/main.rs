use clap::Parser;
use symquic::cli::{run_cli, Args};

fn main() {
    std::process::exit(run_cli(Args::parse()));
}
