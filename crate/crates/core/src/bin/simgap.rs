//! Command-line driver for the failure-discovery pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use simgap::pipeline::{Pipeline, PipelineConfig, Stage};
use simgap::Error;

#[derive(Parser, Debug)]
#[command(version, about = "Discover true-system failures from a model and a small demonstration budget")]
struct Args {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Stage to run: falsify, train-flow, sample, demo-init, refine,
    /// evaluate, report, or all.
    #[arg(long, default_value = "all")]
    stage: String,
    /// Re-run the stage even if its artifacts are current.
    #[arg(long)]
    force: bool,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Ordering { .. } | Error::StaleArtifact { .. } => 3,
        Error::BudgetExhausted { .. } => 4,
        _ => 1,
    }
}

fn run(args: &Args) -> Result<(), Error> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let pipeline = Pipeline::new(cfg, args.out.clone())?;
    let stages: Vec<Stage> = if args.stage == "all" { Stage::ALL.to_vec() } else { vec![args.stage.parse()?] };
    for stage in stages {
        let o = pipeline.run_stage(stage, args.force)?;
        if o.cached {
            println!("{stage:<10} cached");
        } else {
            println!(
                "{stage:<10} done in {:.1}s ({} model rollouts, {} true rollouts)",
                o.wall_clock_s, o.model_rollouts, o.true_rollouts
            );
        }
    }
    println!("artifacts in {}", pipeline.out_dir().display());
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
