//! Closed-form oracle benchmark with a known, injected sim-to-real gap.
//!
//! Coordinates are normalized to the unit box. The model risk is a Gaussian
//! bump around a corner; the true risk adds a logistic "gap" step along one
//! axis, so `R_t >= R_m` everywhere and the true failure set is known
//! analytically. Rollouts orbit the box center at the radius of `z`, which
//! makes the variance coverage grow with the distance from the center.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Benchmark;
use crate::coverage::variance_coverage;
use crate::domain::{Bounds, DisturbanceLevel, EnvPoint, Rollout, Source};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub model_peak: f64,
    pub model_center: [f64; 2],
    pub model_lengthscale: f64,
    pub gap_height: f64,
    pub gap_axis: usize,
    /// The gap is active below this normalized coordinate.
    pub gap_edge: f64,
    pub gap_softness: f64,
    pub orbit_center: [f64; 2],
    pub orbit_steps: usize,
    /// Intrinsic disturbance of the true system.
    pub true_noise: DisturbanceLevel,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            model_peak: 0.6,
            model_center: [1.0, 1.0],
            // Puts the 0.3 level set (half the peak) at radius 0.45.
            model_lengthscale: 0.45 / (2.0 * std::f64::consts::LN_2).sqrt(),
            gap_height: 0.6,
            gap_axis: 0,
            gap_edge: 0.4,
            gap_softness: 0.03,
            orbit_center: [0.5, 0.5],
            orbit_steps: 64,
            true_noise: DisturbanceLevel::ZERO,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.model_lengthscale > 0.0 && self.gap_softness > 0.0 && self.gap_height >= 0.0) {
            return Err(Error::Config(
                "synthetic lengthscale/softness must be positive, gap height nonnegative".into(),
            ));
        }
        if self.gap_axis > 1 || self.orbit_steps == 0 {
            return Err(Error::Config("synthetic gap_axis must be 0 or 1 and orbit_steps positive".into()));
        }
        Ok(())
    }

    /// Model risk at normalized coordinates.
    pub fn model_risk(&self, u: &[f64]) -> f64 {
        let d2 = (u[0] - self.model_center[0]).powi(2) + (u[1] - self.model_center[1]).powi(2);
        self.model_peak * (-d2 / (2.0 * self.model_lengthscale.powi(2))).exp()
    }

    /// Nonnegative gap added by the true system.
    pub fn gap(&self, u: &[f64]) -> f64 {
        self.gap_height / (1.0 + (-(self.gap_edge - u[self.gap_axis]) / self.gap_softness).exp())
    }

    pub fn true_risk(&self, u: &[f64]) -> f64 {
        self.model_risk(u) + self.gap(u)
    }

    /// Whether `u` lies in the region where the gap dominates (past its midpoint).
    pub fn in_gap_region(&self, u: &[f64]) -> bool {
        u[self.gap_axis] < self.gap_edge
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub spec: SyntheticSpec,
    bounds: Bounds,
}

impl SyntheticBenchmark {
    pub fn new(spec: SyntheticSpec, bounds: Bounds) -> Result<Self> {
        spec.validate()?;
        if bounds.dim() != 2 {
            return Err(Error::Config(format!("synthetic benchmark needs d = 2, got {}", bounds.dim())));
        }
        Ok(Self { spec, bounds })
    }

    /// Closed-form risk for `source` at `z`, without noise.
    pub fn eval(&self, z: &EnvPoint, source: Source) -> f64 {
        let u = self.bounds.normalize(z.coords());
        match source {
            Source::Model => self.spec.model_risk(&u),
            Source::True => self.spec.true_risk(&u),
        }
    }

    /// Analytic membership in `{z : R_t(z) > threshold}`.
    pub fn is_true_failure(&self, z: &EnvPoint, threshold: f64) -> bool {
        self.eval(z, Source::True) > threshold
    }

    fn orbit(&self, z: &EnvPoint, d: DisturbanceLevel, seed: u64, source: Source) -> Rollout {
        let spec = &self.spec;
        let u = self.bounds.normalize(z.coords());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dyn_std = d.sigma1.sqrt();
        let out_std = d.sigma2.sqrt();
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

        let perturbed: Vec<f64> =
            if dyn_std > 0.0 { u.iter().map(|x| x + dyn_std * normal()).collect() } else { u.clone() };
        let mut risk = match source {
            Source::Model => spec.model_risk(&perturbed),
            Source::True => spec.true_risk(&perturbed),
        };
        if out_std > 0.0 {
            risk += out_std * normal();
        }

        let c = spec.orbit_center;
        let radius = (u[0] - c[0]).hypot(u[1] - c[1]);
        let phase = (u[1] - c[1]).atan2(u[0] - c[0]);
        let steps = spec.orbit_steps;
        let mut rollout = Rollout::new(u.clone(), d, seed, source);
        let mut prev = u;
        for t in 1..=steps {
            let angle = phase + 2.0 * PI * t as f64 / steps as f64;
            let mut p = vec![c[0] + radius * angle.cos(), c[1] + radius * angle.sin()];
            if dyn_std > 0.0 {
                for x in &mut p {
                    *x += dyn_std * normal();
                }
            }
            for x in &mut p {
                *x = x.clamp(0.0, 1.0);
            }
            let input = vec![p[0] - prev[0], p[1] - prev[1]];
            prev = p.clone();
            rollout.push(input, p, &[("risk", risk)]);
        }
        rollout
    }
}

impl Benchmark for SyntheticBenchmark {
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn simulate_model(&self, z: &EnvPoint, d: DisturbanceLevel, seed: u64) -> Rollout {
        self.orbit(z, d, seed, Source::Model)
    }

    fn simulate_true(&self, z: &EnvPoint, seed: u64) -> Rollout {
        self.orbit(z, self.spec.true_noise, seed, Source::True)
    }

    fn risk(&self, _z: &EnvPoint, rollout: &Rollout) -> f64 {
        rollout.channel("risk").and_then(|c| c.last().copied()).unwrap_or(f64::MAX)
    }

    fn coverage(&self, _z: &EnvPoint, rollout: &Rollout) -> f64 {
        let positions: Vec<[f64; 2]> = rollout.states[1..].iter().map(|s| [s[0], s[1]]).collect();
        variance_coverage(&positions).unwrap_or(0.0)
    }
}
