use clap::Parser;
use tcddpm_cli::cli::Cli;
use tcddpm_cli::{exit_code, EXIT_CONFIG, EXIT_OK};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = tcddpm_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
