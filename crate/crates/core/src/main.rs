use clap::Parser;

fn main() {
    let cli = dualfuse::cli::Cli::parse();
    if let Err(e) = dualfuse::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
