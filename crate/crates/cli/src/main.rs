use clap::Parser;

fn main() {
    let cli = cfclip_cli::Cli::parse();
    std::process::exit(cfclip_cli::run(cli));
}
