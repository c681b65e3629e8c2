//! `hcp` command-line driver: train, sample, analyze and eval over a JSON
//! run configuration.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hcp_core::metrics::FeatureSource;

pub use commands::{
    cmd_analyze, cmd_eval, cmd_features, cmd_sample, cmd_train, AnalyzeArgs, EvalArgs, FeaturesArgs, SampleArgs,
    TrainArgs,
};
pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "hcp", version, about = "Human-centric prior cross-attention toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    Real,
    Generated,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fine-tune HcP layers on a triplet manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one image per prompt, text only.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Inference combination weight; 1 reproduces the plain backbone.
        #[arg(long)]
        gamma: Option<f64>,
        /// Ignore any configured checkpoint.
        #[arg(long)]
        base_only: bool,
    },
    /// Grid and averaged maps of one word from an attention trace.
    Analyze {
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        word: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        display: Option<usize>,
    },
    /// FID and KID between two feature archives, optionally CLIP-score.
    Eval {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        kid_subset_size: Option<usize>,
        #[arg(long)]
        kid_subsets: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, requires = "clip_text")]
        clip_image: Option<PathBuf>,
        #[arg(long, requires = "clip_image")]
        clip_text: Option<PathBuf>,
    },
    /// Embed a directory of PNGs into a feature archive.
    Features {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "generated")]
        source: SourceArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        embedder_seed: Option<u64>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Write the synthetic pose/image/prompt fixture.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        records: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn print_json<T: Serialize>(value: &T) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => {
            let _ = writeln!(std::io::stdout(), "{s}");
        }
        Err(e) => eprintln!("error: {e}"),
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, out, resume } => print_json(&cmd_train(&TrainArgs { config, out, resume })?),
        Command::Sample {
            config,
            prompts,
            checkpoint,
            out,
            gamma,
            base_only,
        } => print_json(&cmd_sample(&SampleArgs {
            config,
            prompts,
            checkpoint,
            out,
            gamma,
            base_only,
        })?),
        Command::Analyze {
            trace,
            word,
            config,
            out,
            display,
        } => print_json(&cmd_analyze(&AnalyzeArgs {
            config,
            trace,
            word,
            out,
            display,
        })?),
        Command::Eval {
            a,
            b,
            config,
            out,
            kid_subset_size,
            kid_subsets,
            seed,
            clip_image,
            clip_text,
        } => print_json(&cmd_eval(&EvalArgs {
            config,
            a,
            b,
            out,
            kid_subset_size,
            kid_subsets,
            seed,
            clip_image,
            clip_text,
        })?),
        Command::Features {
            images,
            out,
            source,
            config,
            embedder_seed,
            dim,
        } => {
            let source = match source {
                SourceArg::Real => FeatureSource::Real,
                SourceArg::Generated => FeatureSource::Generated,
            };
            print_json(&cmd_features(&FeaturesArgs {
                images,
                out,
                source,
                config,
                embedder_seed,
                dim,
            })?)
        }
        Command::MakeFixture { out, records, seed } => {
            let recs = hcp_core::fixture::write_fixture(&out, records, seed)?;
            let prompts: Vec<&str> = recs.iter().map(|r| r.prompt.as_str()).collect();
            print_json(&serde_json::json!({ "out_dir": out, "prompts": prompts }));
        }
    }
    Ok(())
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
