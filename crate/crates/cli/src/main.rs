mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::BoolishValueParser;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "metatts", version, about = "Few-shot speaker adaptation experiments on a toy FastSpeech 2")]
struct Cli {
    /// Worker threads; overrides the config file.
    #[arg(long, global = true, env = "METATTS_WORKERS")]
    workers: Option<usize>,

    /// Keep wall-clock timing out of every artifact except log sidecars.
    #[arg(long, global = true, env = "METATTS_DETERMINISTIC", default_value = "true", value_parser = BoolishValueParser::new())]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test corpora.
    GenCorpus {
        config: PathBuf,
        /// Write here instead of the configured corpus directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Meta-train the model (approach = "meta").
    MetaTrain { config: PathBuf },
    /// Train a multi-task or speaker-encoding baseline.
    TrainBaseline { config: PathBuf },
    /// Clone every test speaker from the frozen task manifest and score the outputs.
    AdaptEval { config: PathBuf },
    /// Export curves, trend tables and similarity matrices from reports.
    Plot {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also render similarity matrices as PGM heat maps.
        #[arg(long)]
        images: bool,
    },
    /// Summarize a checkpoint or report.
    Inspect { path: PathBuf },
}

/// 2 config, 3 data, 4 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    use metatts::Error;
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Numeric(_)) => 4,
        Some(_) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let env = commands::Env { workers: cli.workers, deterministic: cli.deterministic };
    let res = match cli.command {
        Command::GenCorpus { config, out } => commands::gen_corpus(&config, out.as_deref()),
        Command::MetaTrain { config } => commands::train(&config, &env, commands::Verb::MetaTrain),
        Command::TrainBaseline { config } => commands::train(&config, &env, commands::Verb::TrainBaseline),
        Command::AdaptEval { config } => commands::adapt_eval(&config, &env),
        Command::Plot { reports, out, images } => plot::plot(&reports, &out, images),
        Command::Inspect { path } => commands::inspect(&path),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
