use clap::Parser;

fn main() {
    let cli = mlat_cli::Cli::parse();
    if let Err(e) = mlat_cli::execute(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
