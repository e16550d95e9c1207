//! Stage orchestration with on-disk artifacts and a run manifest.
//!
//! Stages run in the order falsify, train-flow, sample, demo-init, refine,
//! evaluate, report. Each stage reads its inputs from the run directory, so
//! separate invocations compose. A completed stage is reused unless forced;
//! re-running a stage invalidates everything downstream of it.

mod config;
pub mod io;
mod manifest;
mod report;
mod stages;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use crate::bench::Benchmark;
use crate::domain::{Bounds, DisturbanceLevel, EnvPoint, Rollout};
use crate::error::{Error, Result};

pub use config::{
    BenchmarkConfig, BudgetConfig, CoverageConfig, DisturbanceConfig, DomainConfig, EvaluateConfig, ModelDatasetConfig,
    PipelineConfig, RiskConfig,
};
pub use manifest::{BudgetLedger, RunManifest, StageRecord};
pub use report::{Accuracy, EvaluationReport, HardwareReference};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Falsify,
    TrainFlow,
    Sample,
    DemoInit,
    Refine,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Falsify,
        Stage::TrainFlow,
        Stage::Sample,
        Stage::DemoInit,
        Stage::Refine,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Falsify => "falsify",
            Stage::TrainFlow => "train-flow",
            Stage::Sample => "sample",
            Stage::DemoInit => "demo-init",
            Stage::Refine => "refine",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    fn prerequisites(self) -> &'static [Stage] {
        let i = Self::ALL.iter().position(|s| *s == self).expect("listed");
        &Self::ALL[..i]
    }

    fn downstream(self) -> impl Iterator<Item = Stage> {
        Self::ALL.into_iter().filter(move |s| *s >= self)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Counts every rollout that passes through it.
struct Counted {
    inner: Box<dyn Benchmark>,
    model: AtomicUsize,
    truth: AtomicUsize,
}

impl Benchmark for Counted {
    fn bounds(&self) -> &Bounds {
        self.inner.bounds()
    }

    fn simulate_model(&self, z: &EnvPoint, d: DisturbanceLevel, seed: u64) -> Rollout {
        self.model.fetch_add(1, Ordering::Relaxed);
        self.inner.simulate_model(z, d, seed)
    }

    fn simulate_true(&self, z: &EnvPoint, seed: u64) -> Rollout {
        self.truth.fetch_add(1, Ordering::Relaxed);
        self.inner.simulate_true(z, seed)
    }

    fn risk(&self, z: &EnvPoint, rollout: &Rollout) -> f64 {
        self.inner.risk(z, rollout)
    }

    fn coverage(&self, z: &EnvPoint, rollout: &Rollout) -> f64 {
        self.inner.coverage(z, rollout)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub cached: bool,
    pub model_rollouts: usize,
    pub true_rollouts: usize,
    pub wall_clock_s: f64,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    hash: String,
    bench: Counted,
}

impl Pipeline {
    /// `out` overrides the configured output directory.
    pub fn new(cfg: PipelineConfig, out: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.unwrap_or_else(|| cfg.output_dir.clone());
        let bench = Counted { inner: cfg.benchmark()?, model: AtomicUsize::new(0), truth: AtomicUsize::new(0) };
        Ok(Self { hash: cfg.hash(), cfg, out, bench })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn manifest(&self) -> Result<Option<RunManifest>> {
        RunManifest::load(&self.path(MANIFEST))
    }

    fn fresh_manifest(&self) -> RunManifest {
        RunManifest {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            budget: BudgetLedger {
                total: self.cfg.budget.total,
                initial: self.cfg.budget.initial,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Runs every stage in order, reusing completed ones.
    pub fn run_all(&self, force: bool) -> Result<Vec<StageOutcome>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s, force)).collect()
    }

    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<StageOutcome> {
        fs::create_dir_all(&self.out)?;
        let mpath = self.path(MANIFEST);
        let mut man = match self.manifest()? {
            Some(m) if m.config_hash == self.hash => m,
            Some(m) if stage != Stage::Falsify && !m.stages.is_empty() => {
                return Err(Error::StaleArtifact { path: mpath, required: Stage::Falsify.name().into() });
            }
            _ => self.fresh_manifest(),
        };
        for pre in stage.prerequisites() {
            let rec = man
                .stages
                .get(pre.name())
                .ok_or_else(|| Error::Ordering { stage: stage.name().into(), required: pre.name().into() })?;
            if let Some(missing) = rec.artifacts.iter().map(|a| self.path(a)).find(|p| !p.exists()) {
                return Err(Error::StaleArtifact { path: missing, required: pre.name().into() });
            }
        }
        if !force {
            if let Some(rec) = man.stages.get(stage.name()) {
                if rec.artifacts.iter().all(|a| self.path(a).exists()) {
                    return Ok(StageOutcome {
                        stage,
                        cached: true,
                        model_rollouts: 0,
                        true_rollouts: 0,
                        wall_clock_s: 0.0,
                    });
                }
            }
        }
        for s in stage.downstream() {
            man.stages.remove(s.name());
        }
        match stage {
            Stage::Falsify => man.budget = self.fresh_manifest().budget,
            Stage::DemoInit => {
                man.budget.initial_used = 0;
                man.budget.sequential_used = 0;
                man.budget.evaluation_queries = 0;
            }
            Stage::Refine => {
                man.budget.sequential_used = 0;
                man.budget.evaluation_queries = 0;
            }
            Stage::Evaluate => man.budget.evaluation_queries = 0,
            _ => {}
        }
        // Persist the invalidation before doing any work.
        man.save(&mpath)?;

        let (m0, t0) = (self.bench.model.load(Ordering::Relaxed), self.bench.truth.load(Ordering::Relaxed));
        let start = Instant::now();
        let artifacts = match stage {
            Stage::Falsify => self.falsify()?,
            Stage::TrainFlow => self.train_flow()?,
            Stage::Sample => self.sample()?,
            Stage::DemoInit => self.demo_init(&mut man.budget)?,
            Stage::Refine => self.refine(&mut man.budget)?,
            Stage::Evaluate => self.evaluate(&mut man.budget)?,
            Stage::Report => self.report(&man)?,
        };
        let rec = StageRecord {
            artifacts,
            wall_clock_s: start.elapsed().as_secs_f64(),
            model_rollouts: self.bench.model.load(Ordering::Relaxed) - m0,
            true_rollouts: self.bench.truth.load(Ordering::Relaxed) - t0,
        };
        let outcome = StageOutcome {
            stage,
            cached: false,
            model_rollouts: rec.model_rollouts,
            true_rollouts: rec.true_rollouts,
            wall_clock_s: rec.wall_clock_s,
        };
        man.stages.insert(stage.name().into(), rec);
        man.save(&mpath)?;
        Ok(outcome)
    }
}
