use clap::Parser;

fn main() {
    let cli = grounder::cli::Cli::parse();
    std::process::exit(grounder::cli::run(cli));
}
