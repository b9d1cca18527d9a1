use clap::Parser;

use promptstream::cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROMPTSTREAM_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = execute(&cli, &mut std::io::stdout()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
