use clap::Parser;
use stainvar_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(threads) = cli.global.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            std::process::exit(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().expect("thread pool is built once");
    }

    let code = match run(&cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
