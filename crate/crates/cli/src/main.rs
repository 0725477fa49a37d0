use clap::Parser;

fn main() {
    let cli = chainshift::cli::Cli::parse();
    if let Err(e) = chainshift::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
