use clap::Parser;
use dlf_core::cli::{self, Cli};

fn main() {
    let args = Cli::parse();
    let stdout = std::io::stdout();
    if let Err(e) = cli::run(args, &mut stdout.lock()) {
        eprintln!("error: {e}");
        std::process::exit(cli::exit_code(&e));
    }
}
