use clap::Parser;

fn main() {
    std::process::exit(jcch::cli::run(jcch::cli::Cli::parse()));
}
