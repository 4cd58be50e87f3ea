use clap::Parser;

fn main() {
    let cli = fastcaps::cli::Cli::parse();
    if let Err(e) = fastcaps::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
