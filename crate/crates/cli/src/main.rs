use clap::Parser;

fn main() {
    let cli = nepf_cli::Cli::parse();
    if let Err(err) = nepf_cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(nepf_cli::exit_code(&err));
    }
}
