mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use manifest::Run;

#[derive(Parser)]
#[command(name = "ppa", version, about = "Cross-lingual alignment pre-training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration or a manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; also where default inputs are looked up.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic parallel corpus and task data.
    GenData(Common),
    /// Build the vocabulary and filter and split the corpus.
    Preprocess(Common),
    /// Warm up the encoder and run alignment training.
    TrainAlign {
        #[command(flatten)]
        common: Common,
        /// Use the full-size encoder and training settings.
        #[arg(long)]
        paper_mode: bool,
        /// Proceed with paper-size settings.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        no_moco: bool,
        #[arg(long)]
        no_tlm: bool,
        /// Replace the translation objective with monolingual masking.
        #[arg(long)]
        mlm: bool,
    },
    /// Finetune a classifier on the source language.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Train without code-switched augmentation.
        #[arg(long)]
        no_cs: bool,
    },
    /// Evaluate retrieval and/or zero-shot classification.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Parallel TSV for sentence retrieval.
        #[arg(long)]
        retrieval: Option<PathBuf>,
        /// Labeled TSV in the target language.
        #[arg(long)]
        zero_shot: Option<PathBuf>,
    },
    /// Run every ablation variant end to end.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        paper_mode: bool,
        #[arg(long)]
        force: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn resolve(common: &Common, paper_mode: bool) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p, paper_mode)?,
        None if paper_mode => RunConfig::paper(),
        None => RunConfig::toy(),
    };
    if let Some(s) = common.seed {
        c.set_seed(s);
    }
    c.validate()?;
    Ok(c)
}

fn guard_paper(c: &RunConfig, force: bool) -> Result<(), Failure> {
    if c.paper_mode && !force {
        return Err(Failure::Usage(
            "paper-size settings need days of accelerator time and far more memory than a toy run; \
             pass --force to proceed anyway"
                .into(),
        ));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(common) => {
            let c = resolve(&common, false)?;
            stages::gen_data(&mut Run::new("gen-data", &common.out, c)?)?;
        }
        Command::Preprocess(common) => {
            let c = resolve(&common, false)?;
            stages::preprocess(&mut Run::new("preprocess", &common.out, c)?)?;
        }
        Command::TrainAlign {
            common,
            paper_mode,
            force,
            no_moco,
            no_tlm,
            mlm,
        } => {
            let mut c = resolve(&common, paper_mode)?;
            guard_paper(&c, force)?;
            if no_moco {
                c.train.use_moco = false;
            }
            if no_tlm {
                c.train.use_tlm = false;
            }
            if mlm {
                c.train.use_mlm = true;
            }
            c.validate()?;
            stages::train_align(&mut Run::new("train-align", &common.out, c)?)?;
        }
        Command::Finetune { common, no_cs } => {
            let mut c = resolve(&common, false)?;
            if no_cs {
                c.code_switch = false;
            }
            stages::finetune(&mut Run::new("finetune", &common.out, c)?)?;
        }
        Command::Eval {
            common,
            retrieval,
            zero_shot,
        } => {
            let c = resolve(&common, false)?;
            let from_config = c.inputs.contains_key("retrieval") || c.inputs.contains_key("zero_shot");
            if retrieval.is_none() && zero_shot.is_none() && !from_config {
                return Err(Failure::Usage("eval needs --retrieval FILE and/or --zero-shot FILE".into()));
            }
            stages::eval(&mut Run::new("eval", &common.out, c)?, retrieval, zero_shot)?;
        }
        Command::Ablate {
            common,
            paper_mode,
            force,
        } => {
            let c = resolve(&common, paper_mode)?;
            guard_paper(&c, force)?;
            stages::ablate(&mut Run::new("ablate", &common.out, c)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
