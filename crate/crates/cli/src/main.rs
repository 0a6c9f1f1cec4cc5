//! `panmt`: build partially aligned corpora, train and fine-tune models,
//! translate and score.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use panmt::Exec;

use commands::{BuildCorpusArgs, EvaluateArgs, FineTuneArgs, GenToyArgs, GradCheckArgs, TrainArgs, TranslateArgs};

#[derive(Debug, Parser)]
#[command(
    name = "panmt",
    version,
    about = "Translation models trained on partially aligned sentence pairs"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// JSON file with default values for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic task: monolingual corpora, phrase table, parallel sets.
    GenToy(GenToyArgs),
    /// Extract partially aligned pairs from two monolingual corpora.
    BuildCorpus(BuildCorpusArgs),
    /// Train a model on partially aligned pairs or parallel text.
    Train(TrainArgs),
    /// Continue training a checkpoint on parallel text.
    FineTune(FineTuneArgs),
    /// Beam-search translation of a tokenized file.
    Translate(TranslateArgs),
    /// Corpus BLEU against one or more references.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients on a random toy model.
    GradCheck(GradCheckArgs),
}

fn run(cli: Cli, matches: &ArgMatches) -> anyhow::Result<ExitCode> {
    let config = cli.config.as_deref().map(config::load).transpose()?;
    let cfg = config.as_ref();
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    match cli.command {
        Command::GenToy(a) => commands::gen_toy(config::resolve(a, name, sub, cfg)?),
        Command::BuildCorpus(a) => commands::build_corpus(config::resolve(a, name, sub, cfg)?, exec),
        Command::Train(a) => commands::train(config::resolve(a, name, sub, cfg)?, exec),
        Command::FineTune(a) => commands::fine_tune(config::resolve(a, name, sub, cfg)?, exec),
        Command::Translate(a) => commands::translate(config::resolve(a, name, sub, cfg)?, exec),
        Command::Evaluate(a) => commands::evaluate(config::resolve(a, name, sub, cfg)?),
        Command::GradCheck(a) => commands::grad_check(config::resolve(a, name, sub, cfg)?),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    match run(cli, &matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
