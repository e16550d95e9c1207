use std::fs;

use serde::{Deserialize, Serialize};

use super::io::{read_points, read_samples, write_points, write_samples, write_table};
use super::{BudgetLedger, Pipeline};
use crate::bench::TrueSystem;
use crate::domain::{Budget, EnvPoint};
use crate::error::{Error, Result};
use crate::falsify::{
    disturbance_grid, extract_model_dataset, grid_samples, label_grid, FalsificationDataset, FalsifyManifest, Label,
    LabelCounts,
};
use crate::flow::{train_flow, Class, FlowModel, TrainingSet};
use crate::gpr::{risk_dataset, sequential_refine, Dataset, GprModel, GprRecord, RefineContext};
use crate::sampler::{run_initial_demos, sample_coverage, select_initial, ChainDiagnostics};

pub const FALSIFY_CSV: &str = "falsify.csv";
pub const FALSIFY_JSON: &str = "falsify.json";
pub const MODEL_DATASET: &str = "model_dataset.csv";
pub const FLOW: &str = "flow.json";
pub const FLOW_TRAINING: &str = "flow_training.csv";
pub const FLOW_REPORT: &str = "flow_report.json";
pub const Z_COV: &str = "z_cov.csv";
pub const CHAINS: &str = "chain_diagnostics.json";
pub const Z1: &str = "z1.csv";
pub const D1_INITIAL: &str = "d1_initial.csv";
pub const D1_FINAL: &str = "d1_final.csv";
pub const REFINE: &str = "refine.json";
pub const GPR_FINAL: &str = "gpr_final.json";
pub const GPR_SIM_ONLY: &str = "gpr_sim_only.json";

/// Stream index of the sim-only GP fit, clear of the per-step indices.
const SIM_ONLY_STREAM: u64 = 1 << 32;

pub fn grid_step(k: usize) -> String {
    format!("grid_step_{k}.csv")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FlowReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub stopped_early: bool,
    pub training_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChainsArtifact {
    radius: f64,
    c_th: f64,
    kept: usize,
    chains: Vec<ChainDiagnostics>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RefineEntry {
    pub k: usize,
    pub z: Option<Vec<f64>>,
    pub risk: Option<f64>,
    pub hyper: crate::gpr::Hyper,
    pub mll: f64,
    pub safe_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RefineArtifact {
    pub stopped: Option<String>,
    pub sequential_used: usize,
    pub steps: Vec<RefineEntry>,
}

fn write_json<T: Serialize>(path: &std::path::Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

pub fn read_gpr(path: &std::path::Path) -> Result<GprModel> {
    let r: GprRecord = serde_json::from_str(&fs::read_to_string(path)?)?;
    GprModel::from_record(&r)
}

impl Pipeline {
    pub(super) fn grid(&self) -> Result<Vec<EnvPoint>> {
        grid_samples(&self.cfg.bounds()?, self.cfg.domain.grid_per_axis)
    }

    pub(super) fn falsification(&self) -> Result<FalsificationDataset> {
        FalsificationDataset::read_csv(&self.path(FALSIFY_CSV), self.cfg.risk_spec())
    }

    pub(super) fn falsify(&self) -> Result<Vec<String>> {
        let cfg = &self.cfg;
        let levels = disturbance_grid(&cfg.disturbance_box(), cfg.disturbance.levels_per_axis)?;
        let fd = label_grid(&self.bench, &self.grid()?, &levels, cfg.risk_spec(), cfg.seed)?;
        fd.write_csv(&self.path(FALSIFY_CSV))?;
        let man = FalsifyManifest {
            bounds: cfg.bounds()?,
            grid_per_axis: cfg.domain.grid_per_axis,
            disturbance_box: cfg.disturbance_box(),
            levels,
            run_seed: cfg.seed,
            risk: cfg.risk_spec(),
            counts: LabelCounts::of(&fd),
        };
        write_json(&self.path(FALSIFY_JSON), &man)?;
        let n_risk = fd.risk_indices().len();
        if n_risk == 0 {
            return Err(Error::NotEnoughPoints { needed: 1, available: 0 });
        }
        let m = cfg.model_dataset.size.unwrap_or(n_risk.min(50));
        write_samples(&self.path(MODEL_DATASET), &extract_model_dataset(&fd, m, cfg.seed)?)?;
        Ok(vec![FALSIFY_CSV.into(), FALSIFY_JSON.into(), MODEL_DATASET.into()])
    }

    pub(super) fn train_flow(&self) -> Result<Vec<String>> {
        let fd = self.falsification()?;
        let pts: Vec<Vec<f64>> = fd.grid.iter().map(|z| z.0.clone()).collect();
        let classes: Vec<Class> =
            fd.labels.iter().map(|l| if l.is_risk() { Class::Risk } else { Class::Safe }).collect();
        let data = TrainingSet::new(&pts, &classes)?;
        let (model, rep) = train_flow(&self.cfg.bounds()?, &data, &self.cfg.flow, self.cfg.seed)?;
        model.save(&self.path(FLOW))?;
        write_table(
            &self.path(FLOW_TRAINING),
            &["epoch".into(), "loss".into()],
            rep.losses.iter().enumerate().map(|(e, l)| vec![e.to_string(), l.to_string()]),
        )?;
        let hits = model.classify_batch(&pts).iter().zip(&classes).filter(|(c, k)| c.class == **k).count();
        let report = FlowReport {
            epochs: rep.losses.len(),
            final_loss: rep.final_loss,
            stopped_early: rep.stopped_early,
            training_accuracy: hits as f64 / pts.len() as f64,
        };
        write_json(&self.path(FLOW_REPORT), &report)?;
        Ok(vec![FLOW.into(), FLOW_TRAINING.into(), FLOW_REPORT.into()])
    }

    pub(super) fn sample(&self) -> Result<Vec<String>> {
        let model = FlowModel::load(&self.path(FLOW))?;
        let fd = self.falsification()?;
        let starts: Vec<Vec<f64>> =
            fd.grid.iter().zip(&fd.labels).filter(|(_, l)| **l == Label::Safe).map(|(z, _)| z.0.clone()).collect();
        let c_th = self.cfg.coverage.threshold;
        let set = sample_coverage(&model, &self.bench, c_th, &self.cfg.sampler, &starts, self.cfg.seed)?;
        let pts: Vec<Vec<f64>> = set.points.iter().map(|p| p.z.clone()).collect();
        let cov: Vec<Vec<f64>> = set.points.iter().map(|p| vec![p.coverage]).collect();
        write_points(&self.path(Z_COV), &pts, &["coverage"], &cov)?;
        let art = ChainsArtifact { radius: set.radius, c_th, kept: pts.len(), chains: set.diagnostics };
        write_json(&self.path(CHAINS), &art)?;
        Ok(vec![Z_COV.into(), CHAINS.into()])
    }

    pub(super) fn demo_init(&self, ledger: &mut BudgetLedger) -> Result<Vec<String>> {
        let (pts, cov) = read_points(&self.path(Z_COV))?;
        let n1 = self.cfg.budget.initial;
        let idx = select_initial(&pts, n1, self.cfg.sampler.kmeans_restarts, self.cfg.seed)?;
        let z1: Vec<Vec<f64>> = idx.iter().map(|&i| pts[i].clone()).collect();
        let c1: Vec<Vec<f64>> = idx.iter().map(|&i| cov[i].clone()).collect();
        write_points(&self.path(Z1), &z1, &["coverage"], &c1)?;
        let bounds = self.cfg.bounds()?;
        let zs = z1.into_iter().map(|z| bounds.point(z)).collect::<Result<Vec<_>>>()?;
        let budget = Budget::new(self.cfg.budget.total, n1)?;
        let system = TrueSystem { bench: &self.bench, budget: &budget, run_seed: self.cfg.seed };
        let d1 = run_initial_demos(&system, &zs)?;
        ledger.initial_used = budget.used();
        write_samples(&self.path(D1_INITIAL), &d1)?;
        Ok(vec![Z1.into(), D1_INITIAL.into()])
    }

    pub(super) fn refine(&self, ledger: &mut BudgetLedger) -> Result<Vec<String>> {
        let cfg = &self.cfg;
        let bounds = cfg.bounds()?;
        let risk = cfg.risk_spec();
        let d1 = read_samples(&self.path(D1_INITIAL))?;
        let d2 = read_samples(&self.path(MODEL_DATASET))?;
        let grid = self.grid()?;
        let budget = Budget::with_used(cfg.budget.total, cfg.budget.initial, ledger.initial_used)?;
        let system = TrueSystem { bench: &self.bench, budget: &budget, run_seed: cfg.seed };
        let ctx = RefineContext {
            system: &system,
            bounds: &bounds,
            risk,
            grid: &grid,
            gpr: &cfg.gpr,
            steps: budget.sequential(),
            kmeans_restarts: cfg.sampler.kmeans_restarts,
            run_seed: cfg.seed,
        };
        let out = sequential_refine(&ctx, d1, &d2)?;
        ledger.sequential_used = budget.used() - ledger.initial_used;

        let mut artifacts = vec![D1_FINAL.into(), REFINE.into(), GPR_FINAL.into(), GPR_SIM_ONLY.into()];
        let th = risk.normalized_threshold();
        let gpts: Vec<Vec<f64>> = grid.iter().map(|z| z.0.clone()).collect();
        for step in &out.steps {
            let vals: Vec<Vec<f64>> =
                step.grid.iter().map(|(m, v)| vec![*m, *v, if *m < th { 0.0 } else { 1.0 }]).collect();
            let name = grid_step(step.k);
            write_points(&self.path(&name), &gpts, &["mean", "variance", "fail"], &vals)?;
            artifacts.push(name);
        }
        write_samples(&self.path(D1_FINAL), &out.d1)?;
        let art = RefineArtifact {
            stopped: out.stopped,
            sequential_used: ledger.sequential_used,
            steps: out
                .steps
                .iter()
                .map(|s| RefineEntry {
                    k: s.k,
                    z: s.query.as_ref().map(|q| q.z.0.clone()),
                    risk: s.query.as_ref().map(|q| q.risk),
                    hyper: s.hyper.clone(),
                    mll: s.mll,
                    safe_count: s.safe_count,
                })
                .collect(),
        };
        write_json(&self.path(REFINE), &art)?;
        write_json(&self.path(GPR_FINAL), &out.model.record())?;

        let data2 = risk_dataset(&d2, &bounds, &risk)?;
        let (sim, _) = GprModel::fit(&Dataset::default(), &data2, &cfg.gpr, cfg.seed, SIM_ONLY_STREAM)?;
        write_json(&self.path(GPR_SIM_ONLY), &sim.record())?;
        Ok(artifacts)
    }
}
