use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cariface_pipeline::evaluation::{self, EVALUATE, TRAIN_PARSER};
use cariface_pipeline::stages::{PREPARE, SHAPE, TEXTURE};
use cariface_pipeline::synthesis::SYNTHESIZE;
use cariface_pipeline::toydata::MAKE_TOY_DATA;
use cariface_pipeline::{Arm, PipelineConfig, Workspace};
use clap::{Parser, Subcommand};

/// Caricature face-parsing adaptation pipeline.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "configs/toy.toml")]
    config: PathBuf,
    /// Overrides the global seed; every stage seed is re-derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restricts per-arm stages to one arm (source, texture, shape, both).
    #[arg(long, global = true)]
    arm: Option<Arm>,
    /// Workspace directory, or the dataset root for make-toy-data.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the procedural toy datasets.
    MakeToyData,
    /// Cluster caricature shapes and styles.
    Prepare,
    /// Train the shape-adaptation generators.
    TrainShape,
    /// Train the texture network on shape-adapted photos.
    TrainTexture,
    /// Write the adapted training sets.
    Synthesize,
    /// Train a parser per arm.
    TrainParser,
    /// Score each arm's parser on the evaluation caricatures.
    Evaluate,
    /// Run every stage and write the comparison table.
    RunAblation,
}

impl Command {
    fn stage(self) -> &'static str {
        match self {
            Command::MakeToyData => MAKE_TOY_DATA,
            Command::Prepare => PREPARE,
            Command::TrainShape => SHAPE,
            Command::TrainTexture => TEXTURE,
            Command::Synthesize => SYNTHESIZE,
            Command::TrainParser => TRAIN_PARSER,
            Command::Evaluate => EVALUATE,
            Command::RunAblation => "run-ablation",
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Command::MakeToyData = cli.command {
        let paths = cariface_pipeline::make_toy_data(&cfg, cli.out.as_deref())?;
        println!("photos: {}", paths.photos.display());
        println!("caricatures: {}", paths.caricatures.display());
        println!("eval: {}", paths.eval.display());
        return Ok(());
    }
    if let Some(out) = &cli.out {
        cfg = cfg.with_workspace(out.clone());
    }
    let ws = Workspace::open(&cfg.workspace)?;
    let arms: Vec<Arm> = cli.arm.map(|a| vec![a]).unwrap_or_else(|| Arm::ALL.to_vec());
    match cli.command {
        Command::MakeToyData => unreachable!(),
        Command::Prepare => {
            let (shapes, styles) = cariface_pipeline::prepare(&cfg, &ws)?;
            println!("shape clusters: {:?}", shapes.cluster_sizes);
            println!("style references: {}", styles.references.join(", "));
        }
        Command::TrainShape => {
            let models = cariface_pipeline::train_shape(&cfg, &ws)?;
            if let Some(last) = models.log.rows.last() {
                println!("final losses: {last:?}");
            }
        }
        Command::TrainTexture => {
            let (_, log) = cariface_pipeline::train_texture(&cfg, &ws)?;
            if let Some(last) = log.rows.last() {
                println!("final losses: {last:?}");
            }
        }
        Command::Synthesize => {
            for arm in arms {
                let m = cariface_pipeline::synthesize(&cfg, &ws, arm)?;
                println!("{arm}: {} pairs", m.records.len());
            }
        }
        Command::TrainParser => {
            for arm in arms {
                let (_, log) = cariface_pipeline::train_parser_for(&cfg, &ws, arm)?;
                println!(
                    "{arm}: final loss {:.4}",
                    log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN)
                );
            }
        }
        Command::Evaluate => {
            let reports = arms
                .into_iter()
                .map(|arm| cariface_pipeline::evaluate(&cfg, &ws, arm))
                .collect::<cariface_pipeline::Result<Vec<_>>>()?;
            print!("{}", evaluation::write_table(&ws, &reports)?.markdown);
        }
        Command::RunAblation => {
            let outcome = cariface_pipeline::run_ablation(&cfg, &ws)?;
            print!("{}", outcome.table.markdown);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: stage `{}` failed: {e:#}", cli.command.stage());
            ExitCode::FAILURE
        }
    }
}
