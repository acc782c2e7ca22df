//! Library half of the `stainvar` binary: argument types, file IO and the
//! subcommand implementations, so tests can drive them in-process.

pub mod args;
pub mod commands;
pub mod error;
pub mod io;

pub use args::{Cli, Command, GlobalOpts};
pub use commands::Outcome;
pub use error::{CliError, CliResult};

/// Seed used when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 0;

/// Runs one parsed invocation. Thread pool setup is left to the caller.
pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let seed = cli.global.seed.unwrap_or(DEFAULT_SEED);
    match &cli.command {
        Command::Fit { image, method, output } => commands::fit(image, *method, output.as_deref(), seed),
        Command::Normalize { input, target, method, output } => {
            commands::normalize(input, target, *method, output, seed)
        }
        Command::GenVariants { input, targets, targets_dir, output } => {
            let targets = match targets_dir {
                Some(dir) => io::list_images(dir)?,
                None => targets.clone(),
            };
            commands::gen_variants(input, &targets, output, seed)
        }
        Command::Synth(args) => commands::synth(args, seed),
        Command::Train { config, data, output } => commands::train(config, data, output, cli.global.seed),
        Command::Eval { run, variants, labels, output } => commands::eval(run, variants, labels, output.as_deref()),
        Command::TileLabel { mask, threshold } => commands::tile_label(mask, *threshold),
    }
}
