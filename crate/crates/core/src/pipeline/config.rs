use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{Benchmark, BicycleBenchmark, BicycleParams, SyntheticBenchmark, SyntheticSpec};
use crate::domain::{Bounds, Budget, DisturbanceBox, RiskSpec};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::gpr::GprConfig;
use crate::sampler::SamplerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BenchmarkConfig {
    Bicycle {
        #[serde(default)]
        params: BicycleParams,
    },
    Synthetic {
        #[serde(default)]
        params: SyntheticSpec,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default = "default_grid")]
    pub grid_per_axis: usize,
}

fn default_grid() -> usize {
    30
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    /// Variance range of the dynamics noise.
    pub sigma1: (f64, f64),
    /// Variance range of the output noise.
    pub sigma2: (f64, f64),
    #[serde(default = "default_levels")]
    pub levels_per_axis: usize,
}

fn default_levels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    pub threshold: f64,
    /// Normalize risks with a sigmoid centered at the threshold.
    pub sigmoid_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    /// N
    pub total: usize,
    /// N1
    pub initial: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDatasetConfig {
    /// Size of D2; defaults to `min(50, |Z_risk|)`.
    pub size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub n_test: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { n_test: 20 }
    }
}

/// Everything a run depends on, read from one TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub benchmark: BenchmarkConfig,
    pub domain: DomainConfig,
    pub disturbance: DisturbanceConfig,
    pub risk: RiskConfig,
    pub coverage: CoverageConfig,
    pub budget: BudgetConfig,
    #[serde(default)]
    pub model_dataset: ModelDatasetConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub gpr: GprConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.bounds()?;
        if self.domain.grid_per_axis < 2 {
            return bad(format!("grid_per_axis must be at least 2, got {}", self.domain.grid_per_axis));
        }
        crate::falsify::disturbance_grid(&self.disturbance_box(), self.disturbance.levels_per_axis)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !self.risk.threshold.is_finite() || !self.coverage.threshold.is_finite() {
            return bad("risk and coverage thresholds must be finite".into());
        }
        if let Some(s) = self.risk.sigmoid_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("sigmoid_scale must be positive, got {s}"));
            }
        }
        Budget::new(self.budget.total, self.budget.initial).map_err(|e| Error::Config(e.to_string()))?;
        if self.model_dataset.size == Some(0) {
            return bad("model_dataset.size must be positive".into());
        }
        if self.evaluate.n_test == 0 {
            return bad("evaluate.n_test must be at least 1".into());
        }
        if self.flow.layers == 0 || self.flow.hidden == 0 || !(self.flow.learning_rate > 0.0) {
            return bad("flow needs layers, hidden width and learning rate > 0".into());
        }
        self.sampler.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.gpr.validate()?;
        self.benchmark().map(|_| ())
    }

    pub fn bounds(&self) -> Result<Bounds> {
        Bounds::new(self.domain.lower.clone(), self.domain.upper.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn disturbance_box(&self) -> DisturbanceBox {
        DisturbanceBox { sigma1: self.disturbance.sigma1, sigma2: self.disturbance.sigma2 }
    }

    pub fn risk_spec(&self) -> RiskSpec {
        match self.risk.sigmoid_scale {
            Some(s) => RiskSpec::sigmoid(self.risk.threshold, s),
            None => RiskSpec::raw(self.risk.threshold),
        }
    }

    pub fn benchmark(&self) -> Result<Box<dyn Benchmark>> {
        let b = self.bounds()?;
        let bench: Box<dyn Benchmark> = match &self.benchmark {
            BenchmarkConfig::Bicycle { params } => Box::new(BicycleBenchmark::new(params.clone(), b)?),
            BenchmarkConfig::Synthetic { params } => Box::new(SyntheticBenchmark::new(params.clone(), b)?),
        };
        Ok(bench)
    }

    /// SHA-256 of the effective configuration, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 1
[benchmark]
kind = "synthetic"
[domain]
lower = [100.0, 100.0]
upper = [500.0, 500.0]
[disturbance]
sigma1 = [2e-5, 2e-2]
sigma2 = [7e-6, 7e-3]
[risk]
threshold = 0.3
[coverage]
threshold = 0.15
[budget]
total = 20
initial = 10
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.domain.grid_per_axis, 30);
        assert_eq!(c.flow, FlowConfig::default());
        assert_eq!(c.evaluate.n_test, 20);
        assert_eq!(c.risk_spec(), RiskSpec::raw(0.3));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = PipelineConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        for (from, to) in [
            ("initial = 10", "initial = 20"),
            ("threshold = 0.3", "threshold = nan"),
            ("kind = \"synthetic\"", "kind = \"pendulum\""),
            ("seed = 1", "seed = 1\nunknown = 3"),
            ("lower = [100.0, 100.0]", "lower = [100.0]"),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(matches!(PipelineConfig::from_toml(&text), Err(Error::Config(_))), "{to}");
        }
    }
}
