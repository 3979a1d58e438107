//! Pipeline subcommands over a single JSON config.
//!
//! `prepare → corpus → finetune → generate → augment → train-eval → report`,
//! each reading and writing artifacts in one output directory tracked by a
//! [`RunManifest`](manifest::RunManifest).

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::PipelineConfig;
pub use error::CliError;
pub use stages::Context;

#[derive(Debug, Parser)]
#[command(name = "idaug", version, about = "Generative ID augmentation pipeline")]
pub struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true, default_value = "idaug.json")]
    pub config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Load, k-core filter and split the dataset.
    Prepare,
    /// Build the instruction corpus from the train split.
    Corpus,
    /// Train the built-in identifier LM on the corpus.
    Finetune,
    /// Generate candidate items for every user.
    Generate,
    /// Filter generations and write augmented training data.
    Augment,
    /// Train and evaluate models on original and augmented data.
    TrainEval,
    /// Print the results table and augmentation summary.
    Report,
    /// Run every stage in order.
    All,
}

/// Loads the config, applies flag overrides and runs `command`. Returns the
/// text to print.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    run_with(config, &cli.out, cli.command)
}

pub fn run_with(
    config: PipelineConfig,
    out: &std::path::Path,
    command: Command,
) -> Result<String, CliError> {
    let mut ctx = Context::new(config, out)?;
    match command {
        Command::Prepare => {
            let b = stages::cmd_prepare(&mut ctx)?;
            Ok(format!(
                "train {} / validation {} / test {} interactions\n",
                b.train.num_interactions(),
                b.validation.num_interactions(),
                b.test.num_interactions()
            ))
        }
        Command::Corpus => Ok(format!(
            "{} corpus instances\n",
            stages::cmd_corpus(&mut ctx)?
        )),
        Command::Finetune => {
            let r = stages::cmd_finetune(&mut ctx)?;
            Ok(format!(
                "loss {:.4} -> {:.4} over {} steps\n",
                r.initial_loss, r.final_loss, r.steps
            ))
        }
        Command::Generate => Ok(format!(
            "{} generation records\n",
            stages::cmd_generate(&mut ctx)?
        )),
        Command::Augment => {
            let s = stages::cmd_augment(&mut ctx)?;
            Ok(format!(
                "{} of {} generations accepted, {} augmented files\n",
                s.filter.accepted,
                s.filter.total,
                s.variants.len()
            ))
        }
        Command::TrainEval => {
            stages::cmd_train_eval(&mut ctx)?;
            stages::cmd_report(&ctx)
        }
        Command::Report => stages::cmd_report(&ctx),
        Command::All => {
            stages::cmd_prepare(&mut ctx)?;
            stages::cmd_corpus(&mut ctx)?;
            if matches!(ctx.config.backend, config::BackendSection::Desk(_)) {
                stages::cmd_finetune(&mut ctx)?;
            }
            stages::cmd_generate(&mut ctx)?;
            stages::cmd_augment(&mut ctx)?;
            stages::cmd_train_eval(&mut ctx)?;
            stages::cmd_report(&ctx)
        }
    }
}
