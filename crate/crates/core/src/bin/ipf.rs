use clap::Parser;

fn main() {
    let cli = ipf::cli::Cli::parse();
    if let Err(e) = ipf::cli::run(cli) {
        eprintln!("ipf: {e}");
        std::process::exit(e.exit_code());
    }
}
