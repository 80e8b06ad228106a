use clap::Parser;
use unitac_gateway::cli::{run, Cli};

fn main() {
    match run(Cli::parse()) {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
