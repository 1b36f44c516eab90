//! `stpyr`: spacetime-pyramid video experiments on a desk-scale budget.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stpyr_cli::acceptance;
use stpyr_cli::commands::{self, RunContext};
use stpyr_cli::config::{parse_variant, Config, Settings};

#[derive(Parser)]
#[command(
    name = "stpyr",
    about = "Spacetime-pyramid video tokenization, training, and generation experiments"
)]
struct Cli {
    /// Configuration file (flat key = value text).
    #[arg(long, global = true, default_value = "configs/toy.cfg")]
    config: PathBuf,
    /// Seed for every random choice the run makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory (defaults to out/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Attention mask variant: var_full | preceding_only | ssa:M | full_history.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic moving-shape dataset to ISRV files.
    Synth,
    /// Encode the dataset to ISTK token files and report fidelity.
    Tokenize,
    /// Train the tokenizer adapters with and without scale dropout.
    TrainTokenizer,
    /// Train the transformer and write an ISCK checkpoint.
    TrainModel,
    /// Sample one video from a caption.
    Generate,
    /// Teacher-force a real prefix and extrapolate extra clips.
    #[command(name = "continue")]
    Continue,
    /// Run a prompted multi-round session with drift logging.
    Interact,
    /// Report attention mask statistics and condition budgets.
    Masks,
    /// Run the full acceptance suite.
    Accept,
}

impl Command {
    fn default_out(&self) -> &'static str {
        match self {
            Command::Synth => "out/synth",
            Command::Tokenize => "out/tokenize",
            Command::TrainTokenizer => "out/train-tokenizer",
            Command::TrainModel => "out/train-model",
            Command::Generate => "out/generate",
            Command::Continue => "out/continue",
            Command::Interact => "out/interact",
            Command::Masks => "out/masks",
            Command::Accept => "out/accept",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    // Validate the configuration fully before any filesystem writes.
    let cfg = Config::from_file(&cli.config)?;
    let settings = Settings::from_config(&cfg)?;
    let variant_override = cli.variant.as_deref().map(parse_variant).transpose()?;
    let out = cli.out.unwrap_or_else(|| PathBuf::from(cli.command.default_out()));
    let ctx = RunContext { cfg, settings, seed: cli.seed, out, variant_override };
    match cli.command {
        Command::Synth => commands::cmd_synth(&ctx)?,
        Command::Tokenize => commands::cmd_tokenize(&ctx)?,
        Command::TrainTokenizer => commands::cmd_train_tokenizer(&ctx)?,
        Command::TrainModel => commands::cmd_train_model(&ctx)?,
        Command::Generate => commands::cmd_generate(&ctx)?,
        Command::Continue => commands::cmd_continue(&ctx)?,
        Command::Interact => commands::cmd_interact(&ctx)?,
        Command::Masks => commands::cmd_masks(&ctx)?,
        Command::Accept => {
            let report = acceptance::run_acceptance(&ctx)?;
            let passed = report.results.iter().filter(|r| r.pass).count();
            println!("{passed}/{} criteria passed", report.results.len());
            return Ok(report.all_pass());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::FAILURE
        }
    }
}
