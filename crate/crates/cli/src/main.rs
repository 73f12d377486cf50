use clap::Parser;
use ridgeforge::{exit_code, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = run(&cli);
    if let Err(e) = &result {
        log::error!("{e}");
        eprintln!("error: {e}");
    }
    std::process::exit(exit_code(&result));
}
