//! Domain types shared by every stage: environment points, disturbance
//! levels, rollouts, risk thresholds and the true-system budget.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed per-axis box bounding the environment variable `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidInput(format!(
                "bounds need matching nonempty lower/upper, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::InvalidInput(format!("invalid interval [{lo}, {hi}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Same interval on every axis.
    pub fn cube(lo: f64, hi: f64, dim: usize) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, coords: &[f64]) -> bool {
        coords.len() == self.dim()
            && coords.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    /// Maps `coords` to the unit box.
    pub fn normalize(&self, coords: &[f64]) -> Vec<f64> {
        coords
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let w = self.width(i);
                if w > 0.0 {
                    (x - self.lower[i]) / w
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn point(&self, coords: Vec<f64>) -> Result<EnvPoint> {
        if !self.contains(&coords) {
            return Err(Error::InvalidInput(format!(
                "point {coords:?} outside bounds {:?}..{:?}",
                self.lower, self.upper
            )));
        }
        Ok(EnvPoint(coords))
    }
}

/// An environment variable `z`. Construct through [`Bounds::point`] to
/// enforce the box constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnvPoint(pub Vec<f64>);

impl EnvPoint {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn sq_dist(&self, other: &EnvPoint) -> f64 {
        sq_dist(&self.0, &other.0)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Scalar variances of the dynamics noise (`sigma1`) and output noise
/// (`sigma2`); the covariances are `sigma_i * I`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceLevel {
    pub sigma1: f64,
    pub sigma2: f64,
}

impl DisturbanceLevel {
    pub const ZERO: DisturbanceLevel = DisturbanceLevel { sigma1: 0.0, sigma2: 0.0 };

    pub fn new(sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(sigma1 >= 0.0 && sigma2 >= 0.0 && sigma1.is_finite() && sigma2.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "disturbance variances must be finite and nonnegative, got ({sigma1}, {sigma2})"
            )));
        }
        Ok(Self { sigma1, sigma2 })
    }

    pub fn is_zero(&self) -> bool {
        self.sigma1 == 0.0 && self.sigma2 == 0.0
    }
}

/// The disturbance box `[s1min, s1max] x [s2min, s2max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceBox {
    pub sigma1: (f64, f64),
    pub sigma2: (f64, f64),
}

impl DisturbanceBox {
    pub fn contains(&self, d: &DisturbanceLevel) -> bool {
        d.is_zero()
            || (d.sigma1 >= self.sigma1.0
                && d.sigma1 <= self.sigma1.1
                && d.sigma2 >= self.sigma2.0
                && d.sigma2 <= self.sigma2.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Model,
    True,
}

/// A closed-loop trajectory. `states` has one more entry than `inputs`;
/// every aux channel has one value per input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub aux: BTreeMap<String, Vec<f64>>,
    pub disturbance: DisturbanceLevel,
    pub seed: u64,
    pub source: Source,
    /// Set when the state became non-finite and the rollout was truncated.
    pub diverged: bool,
}

impl Rollout {
    pub fn new(initial: Vec<f64>, disturbance: DisturbanceLevel, seed: u64, source: Source) -> Self {
        Self {
            states: vec![initial],
            inputs: Vec::new(),
            aux: BTreeMap::new(),
            disturbance,
            seed,
            source,
            diverged: false,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Appends one step: the input applied and the resulting state.
    pub fn push(&mut self, input: Vec<f64>, next: Vec<f64>, aux: &[(&str, f64)]) {
        self.inputs.push(input);
        self.states.push(next);
        for (name, value) in aux {
            self.aux.entry((*name).to_string()).or_default().push(*value);
        }
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.aux.get(name).map(Vec::as_slice)
    }

    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.inputs.len() + 1 && self.aux.values().all(|c| c.len() == self.inputs.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalizer {
    None,
    /// `1 / (1 + exp(-(r - center) / scale))`.
    Sigmoid {
        center: f64,
        scale: f64,
    },
}

/// Failure threshold on the raw risk, with an optional monotone normalizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub threshold: f64,
    pub normalizer: Normalizer,
}

impl RiskSpec {
    pub fn raw(threshold: f64) -> Self {
        Self { threshold, normalizer: Normalizer::None }
    }

    /// Sigmoid centered at the raw threshold.
    pub fn sigmoid(threshold: f64, scale: f64) -> Self {
        Self { threshold, normalizer: Normalizer::Sigmoid { center: threshold, scale } }
    }

    pub fn normalize(&self, risk: f64) -> f64 {
        match self.normalizer {
            Normalizer::None => risk,
            Normalizer::Sigmoid { center, scale } => 1.0 / (1.0 + (-(risk - center) / scale).exp()),
        }
    }

    /// Threshold in normalized units.
    pub fn normalized_threshold(&self) -> f64 {
        self.normalize(self.threshold)
    }

    pub fn is_failure(&self, risk: f64) -> Result<bool> {
        if !risk.is_finite() {
            return Err(Error::InvalidInput(format!("risk must be finite, got {risk}")));
        }
        Ok(self.normalize(risk) > self.normalized_threshold())
    }
}

/// True-system query budget: `total` = N, `initial` = N1.
#[derive(Debug, Serialize, Deserialize)]
pub struct Budget {
    total: usize,
    initial: usize,
    #[serde(with = "atomic_usize")]
    used: AtomicUsize,
}

mod atomic_usize {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &AtomicUsize, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.load(Ordering::SeqCst) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<AtomicUsize, D::Error> {
        Ok(AtomicUsize::new(u64::deserialize(d)? as usize))
    }
}

impl Clone for Budget {
    fn clone(&self) -> Self {
        Self { total: self.total, initial: self.initial, used: AtomicUsize::new(self.used()) }
    }
}

impl Budget {
    pub fn new(total: usize, initial: usize) -> Result<Self> {
        if initial == 0 || initial >= total {
            return Err(Error::InvalidInput(format!("budget needs 0 < N1 < N, got N = {total}, N1 = {initial}")));
        }
        Ok(Self { total, initial, used: AtomicUsize::new(0) })
    }

    pub fn with_used(total: usize, initial: usize, used: usize) -> Result<Self> {
        let b = Self::new(total, initial)?;
        if used > total {
            return Err(Error::InvalidInput(format!("used {used} exceeds N = {total}")));
        }
        b.used.store(used, Ordering::SeqCst);
        Ok(b)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn initial(&self) -> usize {
        self.initial
    }

    /// N2 = N - N1.
    pub fn sequential(&self) -> usize {
        self.total - self.initial
    }

    pub fn used(&self) -> usize {
        self.used.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.total - self.used()
    }

    /// Reserves `n` queries atomically; nothing is consumed on failure.
    pub fn consume(&self, n: usize) -> Result<()> {
        self.used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |used| (used + n <= self.total).then_some(used + n))
            .map(|_| ())
            .map_err(|used| Error::BudgetExhausted { requested: n, remaining: self.total - used, total: self.total })
    }
}

/// One `(z, risk)` observation from either the model or the true system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSample {
    pub z: EnvPoint,
    pub risk: f64,
    pub source: Source,
}

impl RiskSample {
    pub fn new(z: EnvPoint, risk: f64, source: Source) -> Result<Self> {
        if !risk.is_finite() {
            return Err(Error::InvalidInput(format!("risk must be finite, got {risk}")));
        }
        Ok(Self { z, risk, source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn failure_is_strictly_above_threshold() {
        let spec = RiskSpec::raw(0.3);
        assert!(spec.is_failure(0.31).unwrap());
        assert!(!spec.is_failure(0.3).unwrap());
        assert!(spec.is_failure(f64::NAN).is_err());
        assert!(spec.is_failure(f64::INFINITY).is_err());
    }

    #[test]
    fn sigmoid_maps_center_to_half() {
        let spec = RiskSpec::sigmoid(11.5, 1.0);
        assert_eq!(spec.normalize(11.5), 0.5);
        assert_eq!(spec.normalized_threshold(), 0.5);
        assert!(!spec.is_failure(11.5).unwrap());
    }

    #[test]
    fn budget_never_exceeds_total() {
        let b = Budget::new(30, 20).unwrap();
        assert_eq!(b.sequential(), 10);
        b.consume(20).unwrap();
        assert!(matches!(b.consume(11), Err(Error::BudgetExhausted { remaining: 10, .. })));
        assert_eq!(b.used(), 20);
        b.consume(10).unwrap();
        assert!(b.consume(1).is_err());
        assert_eq!(b.used(), 30);
    }

    #[test]
    fn budget_rejects_bad_split() {
        assert!(Budget::new(10, 10).is_err());
        assert!(Budget::new(10, 0).is_err());
    }

    #[test]
    fn bounds_membership() {
        let b = Bounds::new(vec![0.5, 0.5], vec![4.5, 6.5]).unwrap();
        assert!(b.point(vec![0.5, 6.5]).is_ok());
        assert!(b.point(vec![0.4, 1.0]).is_err());
        assert!(b.point(vec![1.0]).is_err());
    }

    #[test]
    fn disturbance_box_admits_zero() {
        let bx = DisturbanceBox { sigma1: (1e-4, 1.0), sigma2: (1e-5, 1e-3) };
        assert!(bx.contains(&DisturbanceLevel::ZERO));
        assert!(bx.contains(&DisturbanceLevel::new(1e-4, 1e-3).unwrap()));
        assert!(!bx.contains(&DisturbanceLevel::new(1e-5, 1e-3).unwrap()));
        assert!(DisturbanceLevel::new(-1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn sigmoid_agrees_with_raw_threshold(r in -100.0f64..100.0, th in -50.0f64..50.0, scale in 0.1f64..10.0) {
            let raw = RiskSpec::raw(th);
            let sig = RiskSpec::sigmoid(th, scale);
            // Saturated sigmoid values collapse to 0 or 1 in floating point;
            // compare only where it is still strictly monotone.
            prop_assume!(((r - th) / scale).abs() < 30.0);
            prop_assert_eq!(raw.is_failure(r).unwrap(), sig.is_failure(r).unwrap());
        }
    }
}
