use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use lvmae::pipeline::{run, ExperimentConfig, Stage};
use lvmae::Error;

/// Long-video MAE pre-training with adaptive decoder masking.
#[derive(Parser)]
#[command(name = "lvmae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the video tokenizer and its token scorer.
    TrainTokenizer(StageArgs),
    /// Pre-train the MAE with dual masking.
    Pretrain(StageArgs),
    /// Fine-tune a pre-trained encoder as a classifier.
    Finetune(StageArgs),
    /// Multi-crop evaluation of a fine-tuned classifier.
    Eval(StageArgs),
    /// Draw and dump encoder/decoder masks for every clip.
    Masks(StageArgs),
    /// FLOPs and memory sweep of the cost model.
    Cost(StageArgs),
    /// PPM frames with decoder-selected tokens highlighted.
    Viz(StageArgs),
    /// Write a synthetic sprite dataset.
    GenData(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// JSON experiment config; the preset is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no config file is given: desk or full.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Override a config key, e.g. `--set budget.rho_d=0.85` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (shorthand for `--set paths.output_dir=DIR`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn split(self) -> (Stage, StageArgs) {
        match self {
            Command::TrainTokenizer(a) => (Stage::TrainTokenizer, a),
            Command::Pretrain(a) => (Stage::Pretrain, a),
            Command::Finetune(a) => (Stage::Finetune, a),
            Command::Eval(a) => (Stage::Eval, a),
            Command::Masks(a) => (Stage::Masks, a),
            Command::Cost(a) => (Stage::Cost, a),
            Command::Viz(a) => (Stage::Viz, a),
            Command::GenData(a) => (Stage::GenData, a),
        }
    }
}

fn resolve(stage: Stage, args: &StageArgs) -> lvmae::Result<ExperimentConfig> {
    let base = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(&args.preset)?,
    };
    let mut cfg = base.with_overrides(&args.sets)?.with_env_seed()?;
    cfg.stage = stage;
    if let Some(out) = &args.out {
        cfg.paths.output_dir = out.clone();
    }
    Ok(cfg)
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error_code={} {err}", err.code());
    ExitCode::from(if err.is_config() { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error_code=usage {}", e.render().to_string().trim_end());
            return ExitCode::from(2);
        }
    };
    let (stage, args) = cli.command.split();
    let cfg = match resolve(stage, &args) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    match run(&cfg) {
        Ok(manifest) => {
            println!("{} finished in {} ms; {} outputs in {}", stage.name(), manifest.wall_clock_ms, manifest.outputs.len(), cfg.paths.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
