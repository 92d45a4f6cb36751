use clap::Parser;

fn main() {
    let cli = imageqx::cli::Cli::parse();
    if let Err(err) = imageqx::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
