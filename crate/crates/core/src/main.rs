use clap::Parser;

fn main() {
    let cli = mapdeblur::cli::Cli::parse();
    if let Err(e) = mapdeblur::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
