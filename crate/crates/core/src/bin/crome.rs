use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = crome::cli::Cli::parse();
    let result = std::panic::catch_unwind(|| crome::cli::run(cli))
        .unwrap_or_else(|_| Err(crome::Error::Internal("unexpected panic".into())));
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    std::process::exit(crome::cli::exit_code(&result));
}
