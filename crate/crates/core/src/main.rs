use clap::Parser;

fn main() {
    let cli = fedsi::cli::Cli::parse();
    std::process::exit(fedsi::cli::run(cli));
}
