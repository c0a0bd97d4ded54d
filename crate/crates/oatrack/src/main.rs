use clap::Parser;

fn main() {
    let cli = oatrack::cli::Cli::parse();
    if let Err(e) = oatrack::cli::run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
