use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = langsep_cli::Cli::parse();
    if let Err(e) = langsep_cli::run(&cli) {
        let (msg, code) = langsep_cli::describe_error(&e);
        eprintln!("{msg}");
        std::process::exit(code);
    }
}
