use clap::Parser;

fn main() {
    integral_cli::init_logging();
    let cli = integral_cli::Cli::parse();
    std::process::exit(integral_cli::run(cli));
}
