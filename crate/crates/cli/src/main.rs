//! `pir`: identify likely forecast failures and revise them.

mod commands;
mod config;
mod layout;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "pir", version, about = "Post-forecast identification and revision")]
struct Cli {
    /// TOML file with one `[subcommand]` table mirroring the flags; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic long-tail benchmark.
    Synth(commands::SynthArgs),
    /// Split and standardize a CSV into a data directory.
    Ingest(commands::IngestArgs),
    /// Produce backbone forecasts (native or external) for every split.
    Backbone(commands::BackboneArgs),
    /// Train a revision model.
    Train(commands::TrainArgs),
    /// Revise forecasts with a trained model.
    Revise(commands::ReviseArgs),
    /// Compare revised forecasts against the backbone.
    Eval(commands::EvalArgs),
    /// Retrain and evaluate model variants side by side.
    Ablate(commands::AblateArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = cli.config.as_deref();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, cfg),
        Command::Ingest(a) => commands::ingest(a, cfg),
        Command::Backbone(a) => commands::backbone(a, cfg),
        Command::Train(a) => commands::train(a, cfg),
        Command::Revise(a) => commands::revise(a, cfg),
        Command::Eval(a) => commands::eval(a, cfg),
        Command::Ablate(a) => commands::ablate(a, cfg),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
