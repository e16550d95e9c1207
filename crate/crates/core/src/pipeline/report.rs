use std::fmt::Write as _;
use std::fs;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::io::{read_points, read_samples, write_points};
use super::stages::{
    read_gpr, FlowReport, RefineArtifact, D1_FINAL, FALSIFY_JSON, FLOW_REPORT, GPR_FINAL, GPR_SIM_ONLY, MODEL_DATASET,
    REFINE, Z_COV,
};
use super::{BenchmarkConfig, BudgetLedger, Pipeline, RunManifest};
use crate::bench::Benchmark;
use crate::domain::EnvPoint;
use crate::error::Result;
use crate::falsify::FalsifyManifest;
use crate::gpr::GprModel;
use crate::rng::{derive_seed, seeded_rng, stage};

pub const EVALUATION_CSV: &str = "evaluation.csv";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const SUMMARY_MD: &str = "summary.md";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CONTOUR_SIM: &str = "contour_sim.csv";
pub const CONTOUR_SIMEXP: &str = "contour_simexp.csv";

/// Per-class accuracy of one predictor; `None` when the class is absent
/// from the test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub fail: Option<f64>,
    pub not_fail: Option<f64>,
}

impl Accuracy {
    pub fn of(truth: &[bool], predicted: &[bool]) -> Self {
        let frac = |class: bool| {
            let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
            (!idx.is_empty()).then(|| idx.iter().filter(|&&i| predicted[i] == class).count() as f64 / idx.len() as f64)
        };
        Self { fail: frac(true), not_fail: frac(false) }
    }
}

/// Reported per-class accuracies from the hardware experiments, kept for
/// side-by-side context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareReference {
    pub experiment: String,
    pub sim: Accuracy,
    pub sim_exp: Accuracy,
}

impl HardwareReference {
    pub fn for_benchmark(b: &BenchmarkConfig) -> Self {
        match b {
            BenchmarkConfig::Bicycle { .. } => Self {
                experiment: "F1-Tenth".into(),
                sim: Accuracy { fail: Some(0.36), not_fail: Some(1.0) },
                sim_exp: Accuracy { fail: Some(1.0), not_fail: Some(1.0) },
            },
            BenchmarkConfig::Synthetic { .. } => Self {
                experiment: "Push-T".into(),
                sim: Accuracy { fail: Some(0.11), not_fail: Some(0.91) },
                sim_exp: Accuracy { fail: Some(0.89), not_fail: Some(0.82) },
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_test: usize,
    pub n_fail: usize,
    pub n_not_fail: usize,
    pub sim: Accuracy,
    pub sim_exp: Accuracy,
    pub reference: HardwareReference,
}

impl Pipeline {
    fn predicted_fail(&self, model: &GprModel, z: &[f64]) -> (f64, bool) {
        let b = self.cfg.bounds().expect("validated");
        let (m, _) = model.predict(&b.normalize(z));
        (m, !(m < self.cfg.risk_spec().normalized_threshold()))
    }

    /// Fresh uniform test points, each rolled out once on the true system
    /// outside the training budget.
    pub(super) fn evaluate(&self, ledger: &mut BudgetLedger) -> Result<Vec<String>> {
        let cfg = &self.cfg;
        let bounds = cfg.bounds()?;
        let spec = cfg.risk_spec();
        let sim = read_gpr(&self.path(GPR_SIM_ONLY))?;
        let simexp = read_gpr(&self.path(GPR_FINAL))?;
        let mut training: Vec<Vec<f64>> = read_samples(&self.path(D1_FINAL))?.into_iter().map(|s| s.z.0).collect();
        training.extend(read_samples(&self.path(MODEL_DATASET))?.into_iter().map(|s| s.z.0));

        let mut rng = seeded_rng(cfg.seed, stage::EVALUATE, 0);
        let mut pts: Vec<Vec<f64>> = Vec::with_capacity(cfg.evaluate.n_test);
        while pts.len() < cfg.evaluate.n_test {
            let z: Vec<f64> =
                bounds.lower.iter().zip(&bounds.upper).map(|(lo, hi)| rng.random_range(*lo..=*hi)).collect();
            if !training.contains(&z) {
                pts.push(z);
            }
        }
        let mut rows = Vec::new();
        let (mut truth, mut p_sim, mut p_simexp) = (Vec::new(), Vec::new(), Vec::new());
        for (i, z) in pts.iter().enumerate() {
            let ez = EnvPoint(z.clone());
            let roll = self.bench.simulate_true(&ez, derive_seed(cfg.seed, stage::EVALUATE, 1 + i as u64));
            let r = self.bench.risk(&ez, &roll);
            let r = if r.is_finite() { r } else { f64::MAX };
            let fail = spec.is_failure(r)?;
            let (ms, fs) = self.predicted_fail(&sim, z);
            let (me, fe) = self.predicted_fail(&simexp, z);
            truth.push(fail);
            p_sim.push(fs);
            p_simexp.push(fe);
            let flag = |b: bool| if b { 1.0 } else { 0.0 };
            rows.push(vec![r, flag(fail), ms, flag(fs), me, flag(fe)]);
        }
        ledger.evaluation_queries = pts.len();
        write_points(
            &self.path(EVALUATION_CSV),
            &pts,
            &["true_risk", "true_fail", "sim_mean", "sim_fail", "simexp_mean", "simexp_fail"],
            &rows,
        )?;
        let n_fail = truth.iter().filter(|t| **t).count();
        let report = EvaluationReport {
            n_test: pts.len(),
            n_fail,
            n_not_fail: pts.len() - n_fail,
            sim: Accuracy::of(&truth, &p_sim),
            sim_exp: Accuracy::of(&truth, &p_simexp),
            reference: HardwareReference::for_benchmark(&cfg.benchmark),
        };
        fs::write(self.path(EVALUATION_JSON), serde_json::to_string_pretty(&report)?)?;
        Ok(vec![EVALUATION_CSV.into(), EVALUATION_JSON.into()])
    }

    pub(super) fn report(&self, man: &RunManifest) -> Result<Vec<String>> {
        let grid = self.grid()?;
        let pts: Vec<Vec<f64>> = grid.iter().map(|z| z.0.clone()).collect();
        let bounds = self.cfg.bounds()?;
        let th = self.cfg.risk_spec().normalized_threshold();
        for (name, file) in [(CONTOUR_SIM, GPR_SIM_ONLY), (CONTOUR_SIMEXP, GPR_FINAL)] {
            let model = read_gpr(&self.path(file))?;
            let norm: Vec<Vec<f64>> = pts.iter().map(|z| bounds.normalize(z)).collect();
            let vals: Vec<Vec<f64>> = model
                .predict_batch(&norm)
                .into_iter()
                .map(|(m, v)| vec![m, v, if m < th { 0.0 } else { 1.0 }])
                .collect();
            write_points(&self.path(name), &pts, &["mean", "variance", "fail"], &vals)?;
        }

        let eval: EvaluationReport = serde_json::from_str(&fs::read_to_string(self.path(EVALUATION_JSON))?)?;
        let falsify: FalsifyManifest = serde_json::from_str(&fs::read_to_string(self.path(FALSIFY_JSON))?)?;
        let flow: FlowReport = serde_json::from_str(&fs::read_to_string(self.path(FLOW_REPORT))?)?;
        let refine: RefineArtifact = serde_json::from_str(&fs::read_to_string(self.path(REFINE))?)?;
        let z_cov = read_points(&self.path(Z_COV))?.0.len();
        let kind = match self.cfg.benchmark {
            BenchmarkConfig::Bicycle { .. } => "bicycle",
            BenchmarkConfig::Synthetic { .. } => "synthetic",
        };
        let summary = serde_json::json!({
            "config_hash": man.config_hash,
            "seed": man.seed,
            "benchmark": kind,
            "budget": man.budget,
            "falsify": falsify.counts,
            "flow": flow,
            "z_cov": z_cov,
            "refine_stopped": refine.stopped,
            "evaluation": eval,
        });
        fs::write(self.path(SUMMARY_JSON), serde_json::to_string_pretty(&summary)?)?;

        let pct = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{:.0}%", 100.0 * v));
        let b = &man.budget;
        let mut md = String::new();
        writeln!(md, "# Run summary\n").ok();
        writeln!(md, "- benchmark: {kind}").ok();
        writeln!(md, "- config hash: `{}`", man.config_hash).ok();
        writeln!(md, "- seed: {}", man.seed).ok();
        writeln!(
            md,
            "- true-system budget: {} of N = {} used ({} initial, {} sequential); {} evaluation rollouts outside the budget",
            b.training_queries(),
            b.total,
            b.initial_used,
            b.sequential_used,
            b.evaluation_queries
        )
        .ok();
        let c = falsify.counts;
        writeln!(md, "- falsification: {} fail_f, {} noise_fail, {} safe", c.fail_f, c.noise_fail, c.safe).ok();
        writeln!(md, "- flow: {} epochs, training accuracy {:.1}%", flow.epochs, 100.0 * flow.training_accuracy).ok();
        writeln!(md, "- coverage set: {z_cov} points").ok();
        if let Some(s) = &refine.stopped {
            writeln!(md, "- refinement stopped early: {s}").ok();
        }
        writeln!(
            md,
            "\n## Accuracy on {} test points ({} fail, {} not fail)\n",
            eval.n_test, eval.n_fail, eval.n_not_fail
        )
        .ok();
        writeln!(md, "| | Sim | Sim+Exp | {} Sim | {} Sim+Exp |", eval.reference.experiment, eval.reference.experiment)
            .ok();
        writeln!(md, "|---|---|---|---|---|").ok();
        let r = &eval.reference;
        writeln!(
            md,
            "| Fail | {} | {} | {} | {} |",
            pct(eval.sim.fail),
            pct(eval.sim_exp.fail),
            pct(r.sim.fail),
            pct(r.sim_exp.fail)
        )
        .ok();
        writeln!(
            md,
            "| NotFail | {} | {} | {} | {} |",
            pct(eval.sim.not_fail),
            pct(eval.sim_exp.not_fail),
            pct(r.sim.not_fail),
            pct(r.sim_exp.not_fail)
        )
        .ok();
        writeln!(
            md,
            "\nThe reference columns are hardware results and are shown for the direction of the effect only."
        )
        .ok();
        fs::write(self.path(SUMMARY_MD), md)?;
        Ok(vec![CONTOUR_SIM.into(), CONTOUR_SIMEXP.into(), SUMMARY_JSON.into(), SUMMARY_MD.into()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_per_class() {
        let truth = [true, true, false, false, false];
        assert_eq!(Accuracy::of(&truth, &truth), Accuracy { fail: Some(1.0), not_fail: Some(1.0) });
        let a = Accuracy::of(&truth, &[true, false, false, true, false]);
        assert_eq!(a.fail, Some(0.5));
        assert!((a.not_fail.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(Accuracy::of(&[false], &[false]).fail, None);
    }
}
