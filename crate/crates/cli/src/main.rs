use clap::Parser;

fn main() {
    let cli = contbern_cli::Cli::parse();
    if let Err(e) = contbern_cli::execute(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
