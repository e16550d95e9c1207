//! Closed-loop benchmarks: an approximate model simulator plus a mismatched
//! "true" simulator, each with its risk and coverage functions.

pub mod bicycle;
pub mod lqr;
pub mod path;
pub mod synthetic;

use crate::domain::{Bounds, Budget, DisturbanceLevel, EnvPoint, RiskSample, Rollout, Source};
use crate::error::Result;
use crate::rng::{derive_seed, stage};

pub use bicycle::{BicycleBenchmark, BicycleParams};
pub use synthetic::{SyntheticBenchmark, SyntheticSpec};

/// A benchmark pairs a model simulator `f` with a true system, both driven
/// by the same policy. Implementations are pure functions of their inputs.
pub trait Benchmark: Send + Sync {
    fn bounds(&self) -> &Bounds;

    fn simulate_model(&self, z: &EnvPoint, d: DisturbanceLevel, seed: u64) -> Rollout;

    fn simulate_true(&self, z: &EnvPoint, seed: u64) -> Rollout;

    /// Raw (unnormalized) risk `R(z, X_z)`.
    fn risk(&self, z: &EnvPoint, rollout: &Rollout) -> f64;

    /// Coverage `C(z, X_z)`.
    fn coverage(&self, z: &EnvPoint, rollout: &Rollout) -> f64;

    fn simulate(&self, z: &EnvPoint, d: DisturbanceLevel, seed: u64, source: Source) -> Rollout {
        match source {
            Source::Model => self.simulate_model(z, d, seed),
            Source::True => self.simulate_true(z, seed),
        }
    }

    /// Coverage of the zero-noise model rollout at `z`.
    fn model_coverage(&self, z: &EnvPoint) -> f64 {
        let roll = self.simulate_model(z, DisturbanceLevel::ZERO, 0);
        self.coverage(z, &roll)
    }
}

/// Budget-guarded access to the true system.
///
/// Query `k` (counting from the first query of the run) uses the seed
/// derived from `(run_seed, TRUE_SYSTEM, k)`.
pub struct TrueSystem<'a> {
    pub bench: &'a dyn Benchmark,
    pub budget: &'a Budget,
    pub run_seed: u64,
}

impl TrueSystem<'_> {
    /// Consumes `zs.len()` queries up front, then rolls out each point.
    pub fn query(&self, zs: &[EnvPoint]) -> Result<Vec<RiskSample>> {
        let first = self.budget.used();
        self.budget.consume(zs.len())?;
        zs.iter()
            .enumerate()
            .map(|(j, z)| {
                let seed = derive_seed(self.run_seed, stage::TRUE_SYSTEM, (first + j) as u64);
                let roll = self.bench.simulate_true(z, seed);
                let r = self.bench.risk(z, &roll);
                RiskSample::new(z.clone(), if r.is_finite() { r } else { f64::MAX }, Source::True)
            })
            .collect()
    }
}
