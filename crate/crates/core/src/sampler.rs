//! Coverage-driven sampling in the flow's latent space.
//!
//! The target is `log p2(w) - relu(C_th - C(g(w)))`: the safe-class latent
//! Gaussian, penalized linearly where the zero-noise model rollout at
//! `z = g(w)` covers less than `C_th`. Random-walk proposals are projected
//! onto a ball around the safe mean before they are evaluated.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::bench::{Benchmark, TrueSystem};
use crate::domain::{sq_dist, EnvPoint, RiskSample};
use crate::error::{Error, Result};
use crate::flow::{Class, FlowModel};
use crate::kmeans::{kmeans, nearest_distinct, KMeansConfig};
use crate::rng::{seeded_rng, stage, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Projection radius; `None` uses the radius holding `radius_mass` of
    /// the latent Gaussian.
    pub radius: Option<f64>,
    pub radius_mass: f64,
    pub initial_step: f64,
    pub pilot_steps: usize,
    pub pilot_rounds: usize,
    pub target_acceptance: (f64, f64),
    pub kmeans_restarts: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            steps: 20_000,
            burn_in: 5_000,
            thin: 10,
            radius: None,
            radius_mass: 0.95,
            initial_step: 0.5,
            pilot_steps: 500,
            pilot_rounds: 12,
            target_acceptance: (0.2, 0.4),
            kmeans_restarts: 50,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.thin == 0 || self.steps <= self.burn_in {
            return Err(Error::Config("sampler needs chains >= 1, thin >= 1 and steps > burn_in".into()));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) {
                return Err(Error::Config(format!("projection radius must be positive, got {r}")));
            }
        }
        if !(self.radius_mass > 0.0 && self.radius_mass < 1.0) || !(self.initial_step > 0.0) {
            return Err(Error::Config("radius_mass must lie in (0, 1) and initial_step be positive".into()));
        }
        let (lo, hi) = self.target_acceptance;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config("target_acceptance must satisfy 0 < lo < hi < 1".into()));
        }
        Ok(())
    }

    pub fn radius_for(&self, dim: usize, variance: f64) -> f64 {
        self.radius.unwrap_or_else(|| variance.sqrt() * chi_quantile(dim, self.radius_mass))
    }
}

/// Quantile of the chi distribution with `dim` degrees of freedom.
pub fn chi_quantile(dim: usize, p: f64) -> f64 {
    ChiSquared::new(dim as f64).expect("positive degrees of freedom").inverse_cdf(p).sqrt()
}

/// `P[w] = c + r (w - c) / |w - c|` when `|w - c| > r`, else `w`. The flag
/// reports whether the projection moved the point.
///
/// Points within a relative 1e-12 of the sphere count as inside, which
/// makes the operator exactly idempotent under round-off.
pub fn project(w: &[f64], c: &[f64], r: f64) -> (Vec<f64>, bool) {
    let dist = sq_dist(w, c).sqrt();
    if dist > r * (1.0 + 1e-12) {
        (w.iter().zip(c).map(|(x, ci)| ci + r * (x - ci) / dist).collect(), true)
    } else {
        (w.to_vec(), false)
    }
}

/// `log p2(w) - max(0, C_th - coverage)`.
pub fn penalized_log_density(log_p2: f64, coverage: f64, c_th: f64) -> f64 {
    log_p2 - (c_th - coverage).max(0.0)
}

#[derive(Clone, Debug)]
pub struct ChainRun {
    /// State after each step.
    pub states: Vec<Vec<f64>>,
    pub accepted: usize,
    pub projections: usize,
}

impl ChainRun {
    pub fn acceptance_rate(&self) -> f64 {
        if self.states.is_empty() {
            0.0
        } else {
            self.accepted as f64 / self.states.len() as f64
        }
    }
}

/// Gaussian random-walk Metropolis-Hastings with projected proposals.
///
/// Exactly `d` normals and one uniform are drawn per step whatever the
/// densities, so two targets differing by a constant see the same stream.
pub fn mh_chain<F>(
    mut log_density: F,
    start: &[f64],
    center: &[f64],
    radius: f64,
    step: f64,
    steps: usize,
    rng: &mut Rng,
) -> Result<ChainRun>
where
    F: FnMut(&[f64]) -> f64,
{
    let (mut w, _) = project(start, center, radius);
    let mut lp = log_density(&w);
    if !lp.is_finite() {
        return Err(Error::InvalidInput(format!("chain start {w:?} has log density {lp}")));
    }
    let mut run = ChainRun { states: Vec::with_capacity(steps), accepted: 0, projections: 0 };
    for _ in 0..steps {
        let raw: Vec<f64> = w.iter().map(|x| x + step * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
        let u: f64 = rng.random();
        let (prop, moved) = project(&raw, center, radius);
        run.projections += moved as usize;
        let lq = log_density(&prop);
        if u.ln() < lq - lp {
            w = prop;
            lp = lq;
            run.accepted += 1;
        }
        run.states.push(w.clone());
    }
    Ok(run)
}

/// Short pilot runs rescaling the step until the acceptance rate falls in
/// `target`; returns the step and the last pilot acceptance.
pub fn tune_step<F>(
    mut log_density: F,
    start: &[f64],
    center: &[f64],
    radius: f64,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<(f64, f64)>
where
    F: FnMut(&[f64]) -> f64,
{
    let (lo, hi) = cfg.target_acceptance;
    let mid = 0.5 * (lo + hi);
    let mut step = cfg.initial_step;
    let mut acc = f64::NAN;
    for _ in 0..cfg.pilot_rounds {
        acc = mh_chain(&mut log_density, start, center, radius, step, cfg.pilot_steps, rng)?.acceptance_rate();
        if (lo..=hi).contains(&acc) {
            break;
        }
        step *= (acc / mid).clamp(0.25, 4.0);
    }
    Ok((step, acc))
}

fn quantize(z: &[f64]) -> Vec<i64> {
    z.iter().map(|x| (x / 1e-9).round() as i64).collect()
}

/// Log target in latent space with a per-chain cache of zero-noise model
/// coverages keyed by `z` on a 1e-9 lattice.
pub struct CoveragePosterior<'a> {
    pub model: &'a FlowModel,
    pub bench: &'a dyn Benchmark,
    pub c_th: f64,
    cache: HashMap<Vec<i64>, f64>,
    pub rollouts: usize,
}

impl<'a> CoveragePosterior<'a> {
    pub fn new(model: &'a FlowModel, bench: &'a dyn Benchmark, c_th: f64) -> Self {
        Self { model, bench, c_th, cache: HashMap::new(), rollouts: 0 }
    }

    pub fn coverage(&mut self, z: &[f64]) -> f64 {
        let key = quantize(z);
        if let Some(c) = self.cache.get(&key) {
            return *c;
        }
        let p = EnvPoint(z.to_vec());
        let c = self.bench.model_coverage(&p);
        self.rollouts += 1;
        self.cache.insert(key, c);
        c
    }

    /// `-inf` when `g(w)` leaves the search box.
    pub fn log_density(&mut self, w: &[f64]) -> f64 {
        let z = self.model.forward(w);
        if !self.bench.bounds().contains(&z) {
            return f64::NEG_INFINITY;
        }
        let log_p2 = self.model.mixture.log_density(Class::Safe, w);
        let c = self.coverage(&z);
        penalized_log_density(log_p2, c, self.c_th)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub z: Vec<f64>,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub chain: usize,
    pub step: f64,
    pub pilot_acceptance: f64,
    pub acceptance_rate: f64,
    pub projections: usize,
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub kept: usize,
    pub rollouts: usize,
    pub warning: Option<String>,
}

/// `Z_cov` with the chains' diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageSet {
    pub points: Vec<CoveragePoint>,
    pub radius: f64,
    pub c_th: f64,
    pub diagnostics: Vec<ChainDiagnostics>,
}

/// Latent start with the highest finite target among the safe mean and the
/// projected preimages of `candidates`.
fn choose_start(
    post: &mut CoveragePosterior,
    candidates: &[Vec<f64>],
    center: &[f64],
    radius: f64,
) -> Result<Vec<f64>> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    let pre = std::iter::once(center.to_vec()).chain(candidates.iter().map(|z| post.model.inverse(z).0));
    for w in pre {
        let (w, _) = project(&w, center, radius);
        let lp = post.log_density(&w);
        if lp.is_finite() && best.as_ref().is_none_or(|(b, _)| lp > *b) {
            best = Some((lp, w));
        }
    }
    best.map(|(_, w)| w)
        .ok_or_else(|| Error::InvalidInput("no chain start maps inside the search box; check the trained flow".into()))
}

/// Runs the independently seeded chains and keeps thinned post-burn-in
/// states whose image has coverage above `c_th` and is classified safe.
/// `candidates` are search-space points tried as chain starts.
pub fn sample_coverage(
    model: &FlowModel,
    bench: &dyn Benchmark,
    c_th: f64,
    cfg: &SamplerConfig,
    candidates: &[Vec<f64>],
    run_seed: u64,
) -> Result<CoverageSet> {
    cfg.validate()?;
    let center = model.mixture.mean(Class::Safe).to_vec();
    let radius = cfg.radius_for(model.flow.dim(), model.mixture.variance);
    let runs: Vec<Result<(Vec<CoveragePoint>, ChainDiagnostics)>> = (0..cfg.chains)
        .into_par_iter()
        .map(|k| {
            let mut post = CoveragePosterior::new(model, bench, c_th);
            let start = choose_start(&mut post, candidates, &center, radius)?;
            let mut pilot_rng = seeded_rng(run_seed, stage::MH_PILOT, k as u64);
            let (step, pilot_acc) = tune_step(|w| post.log_density(w), &start, &center, radius, cfg, &mut pilot_rng)?;
            let mut rng = seeded_rng(run_seed, stage::MH_CHAIN, k as u64);
            let run = mh_chain(|w| post.log_density(w), &start, &center, radius, step, cfg.steps, &mut rng)?;
            let mut kept = Vec::new();
            for w in run.states.iter().skip(cfg.burn_in).step_by(cfg.thin) {
                let z = model.forward(w);
                let c = post.coverage(&z);
                if c > c_th && model.classify(&z).class == Class::Safe {
                    kept.push(CoveragePoint { z, coverage: c });
                }
            }
            let acc = run.acceptance_rate();
            let warning = (acc < 0.01).then(|| format!("chain {k} acceptance {acc:.4} is below 1%"));
            let diag = ChainDiagnostics {
                chain: k,
                step,
                pilot_acceptance: pilot_acc,
                acceptance_rate: acc,
                projections: run.projections,
                steps: cfg.steps,
                burn_in: cfg.burn_in,
                thin: cfg.thin,
                kept: kept.len(),
                rollouts: post.rollouts,
                warning,
            };
            Ok((kept, diag))
        })
        .collect();
    let mut seen = std::collections::HashSet::new();
    let mut points = Vec::new();
    let mut diagnostics = Vec::new();
    for r in runs {
        let (kept, diag) = r?;
        for p in kept {
            if seen.insert(quantize(&p.z)) {
                points.push(p);
            }
        }
        diagnostics.push(diag);
    }
    if points.is_empty() {
        return Err(Error::EmptyCoverageSet { c_th });
    }
    Ok(CoverageSet { points, radius, c_th, diagnostics })
}

/// Indices of `N1` members of `Z_cov` nearest to the k-means centroids.
pub fn select_initial(z_cov: &[Vec<f64>], n1: usize, restarts: usize, run_seed: u64) -> Result<Vec<usize>> {
    if z_cov.len() < n1 {
        return Err(Error::NotEnoughPoints { needed: n1, available: z_cov.len() });
    }
    let cfg = KMeansConfig { restarts, ..KMeansConfig::default() };
    let clusters = kmeans(z_cov, n1, cfg, &mut seeded_rng(run_seed, stage::SELECT_INITIAL, 0))?;
    nearest_distinct(z_cov, &clusters.centroids)
}

/// One true-system rollout per initial demonstration point.
pub fn run_initial_demos(system: &TrueSystem, z1: &[EnvPoint]) -> Result<Vec<RiskSample>> {
    system.query(z1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{SyntheticBenchmark, SyntheticSpec};
    use crate::domain::{Bounds, Budget, Source};
    use crate::flow::LatentMixture;
    use proptest::prelude::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project(&[2.0, 0.0], &[0.0, 0.0], 1.0).0, vec![1.0, 0.0]);
        assert_eq!(project(&[0.3, -0.2], &[0.0, 0.0], 1.0), (vec![0.3, -0.2], false));
        let c = [-3.0, 0.0];
        let (p, moved) = project(&[5.0, 5.0], &c, 2.0);
        assert!(moved);
        assert_eq!(project(&p, &c, 2.0).0, p);
    }

    #[test]
    fn penalty_is_relu() {
        assert_eq!(penalized_log_density(-2.0, 1.5, 1.0), -2.0);
        assert_eq!(penalized_log_density(-2.0, 0.0, 1.0), -3.0);
        assert_eq!(penalized_log_density(-2.0, 1.0, 1.0), -2.0);
    }

    #[test]
    fn chi_quantile_matches_closed_form_in_two_dimensions() {
        let q = chi_quantile(2, 0.95);
        assert!((q - (-2.0 * 0.05f64.ln()).sqrt()).abs() < 1e-9);
    }

    fn gaussian(mu: [f64; 2]) -> impl Fn(&[f64]) -> f64 {
        move |w: &[f64]| -0.5 * ((w[0] - mu[0]).powi(2) + (w[1] - mu[1]).powi(2))
    }

    #[test]
    fn chain_is_deterministic_and_shift_invariant() {
        let mu = [-3.0, 0.0];
        let run = |shift: f64| {
            let f = gaussian(mu);
            mh_chain(|w| f(w) + shift, &mu, &mu, 2.5, 0.9, 3000, &mut seeded_rng(4, stage::MH_CHAIN, 0)).unwrap()
        };
        let a = run(0.0);
        let b = run(0.0);
        let c = run(5.0);
        assert_eq!(a.states, b.states);
        assert_eq!(a.states, c.states);
        assert!(a.accepted > 0 && a.accepted < 3000);
    }

    #[test]
    fn evaluated_proposals_stay_in_ball() {
        let mu = [-3.0, 0.0];
        let f = gaussian([0.0, 0.0]);
        let mut worst: f64 = 0.0;
        let run = mh_chain(
            |w| {
                worst = worst.max(sq_dist(w, &mu).sqrt());
                f(w)
            },
            &mu,
            &mu,
            1.0,
            2.0,
            2000,
            &mut seeded_rng(5, stage::MH_CHAIN, 0),
        )
        .unwrap();
        assert!(worst <= 1.0 + 1e-12);
        assert!(run.projections > 0);
    }

    #[test]
    fn pilot_reaches_target_band() {
        let mu = [-3.0, 0.0];
        let cfg = SamplerConfig { initial_step: 20.0, ..SamplerConfig::default() };
        let (step, acc) = tune_step(gaussian(mu), &mu, &mu, 1e6, &cfg, &mut seeded_rng(6, stage::MH_PILOT, 0)).unwrap();
        assert!((0.2..=0.4).contains(&acc), "acceptance {acc} at step {step}");
    }

    fn synthetic() -> SyntheticBenchmark {
        SyntheticBenchmark::new(SyntheticSpec::default(), Bounds::cube(100.0, 500.0, 2).unwrap()).unwrap()
    }

    #[test]
    fn coverage_set_members_satisfy_both_predicates() {
        let bench = synthetic();
        let mut model = FlowModel::new(bench.bounds(), 2, 4, &mut seeded_rng(0, stage::FLOW_INIT, 0)).unwrap();
        // The untrained flow is whitening only; shrink the mixture to the unit box.
        model.mixture = LatentMixture { means: [vec![0.3, 0.0], vec![0.0, 0.0]], variance: 0.04 };
        let cfg = SamplerConfig { chains: 2, steps: 3000, burn_in: 500, thin: 5, ..SamplerConfig::default() };
        let set = sample_coverage(&model, &bench, 0.15, &cfg, &[], 3).unwrap();
        assert!(!set.points.is_empty());
        for p in &set.points {
            assert!(p.coverage > 0.15);
            assert_eq!(model.classify(&p.z).class, Class::Safe);
            assert_eq!(p.coverage, bench.model_coverage(&EnvPoint(p.z.clone())));
        }
        assert_eq!(set, sample_coverage(&model, &bench, 0.15, &cfg, &[], 3).unwrap());
        assert!(matches!(sample_coverage(&model, &bench, 10.0, &cfg, &[], 3), Err(Error::EmptyCoverageSet { .. })));
    }

    #[test]
    fn initial_selection_and_demos() {
        let pts: Vec<Vec<f64>> = (0..12).map(|i| vec![100.0 + 30.0 * i as f64, 480.0 - 25.0 * i as f64]).collect();
        let idx = select_initial(&pts, 12, 5, 1).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        let idx = select_initial(&pts, 4, 5, 1).unwrap();
        assert_eq!(idx.len(), 4);
        assert!(select_initial(&pts, 13, 5, 1).is_err());

        let bench = synthetic();
        let budget = Budget::new(20, 10).unwrap();
        let sys = TrueSystem { bench: &bench, budget: &budget, run_seed: 0 };
        let z1: Vec<EnvPoint> = idx.iter().map(|&i| EnvPoint(pts[i].clone())).collect();
        let d1 = run_initial_demos(&sys, &z1).unwrap();
        assert_eq!(budget.used(), 4);
        assert!(d1.iter().all(|s| s.source == Source::True));
        let big: Vec<EnvPoint> = vec![EnvPoint(vec![300.0, 300.0]); 17];
        assert!(matches!(run_initial_demos(&sys, &big), Err(Error::BudgetExhausted { .. })));
        assert_eq!(budget.used(), 4);
    }

    proptest! {
        #[test]
        fn projection_lands_on_sphere(x in -50.0f64..50.0, y in -50.0f64..50.0, r in 0.1f64..5.0) {
            let c = [-3.0, 0.0];
            let (p, moved) = project(&[x, y], &c, r);
            let d = sq_dist(&p, &c).sqrt();
            if moved {
                prop_assert!((d - r).abs() < 1e-9);
            } else {
                prop_assert!(d <= r);
            }
            prop_assert_eq!(project(&p, &c, r).0, p);
        }
    }
}
