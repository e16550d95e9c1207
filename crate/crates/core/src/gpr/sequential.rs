//! Sequential demonstration selection: query the true system where the
//! current predictor says "safe" but previous demonstrations are farthest.

use serde::{Deserialize, Serialize};

use super::{Dataset, GprConfig, GprModel, Hyper};
use crate::bench::TrueSystem;
use crate::domain::{sq_dist, Bounds, EnvPoint, RiskSample, RiskSpec};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::rng::{seeded_rng, stage, Rng};

/// GP inputs are the points mapped to the unit box; targets are normalized risks.
pub fn risk_dataset(samples: &[RiskSample], bounds: &Bounds, risk: &RiskSpec) -> Result<Dataset> {
    Dataset::new(
        samples.iter().map(|s| bounds.normalize(s.z.coords())).collect(),
        samples.iter().map(|s| risk.normalize(s.risk)).collect(),
    )
}

/// Indices of `grid` whose predicted mean is below `threshold`.
pub fn safe_region(model: &GprModel, grid: &[Vec<f64>], threshold: f64) -> Result<Vec<usize>> {
    let idx: Vec<usize> =
        model.predict_batch(grid).iter().enumerate().filter(|(_, (m, _))| *m < threshold).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(Error::EmptySafeRegion { threshold });
    }
    Ok(idx)
}

/// Candidate maximizing the distance to its nearest previous point. Exact
/// ties go to the lexicographically smallest candidate.
pub fn max_min_index(candidates: &[Vec<f64>], previous: &[Vec<f64>]) -> Option<usize> {
    let score = |c: &[f64]| previous.iter().map(|p| sq_dist(c, p)).fold(f64::INFINITY, f64::min);
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = score(c);
        best = match best {
            Some((j, bs)) if bs > s || (bs == s && candidates[j].as_slice() <= c.as_slice()) => Some((j, bs)),
            _ => Some((i, s)),
        };
    }
    best.map(|(i, _)| i)
}

/// Clusters the safe region into `min(n2, |region|)` groups and returns the
/// centroid farthest from all previous demonstrations.
pub fn next_point(
    region: &[Vec<f64>],
    n2: usize,
    previous: &[Vec<f64>],
    restarts: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if region.is_empty() || n2 == 0 {
        return Err(Error::NotEnoughPoints { needed: 1, available: region.len().min(n2) });
    }
    let k = n2.min(region.len());
    let cfg = KMeansConfig { restarts, ..KMeansConfig::default() };
    let clusters = kmeans(region, k, cfg, rng)?;
    let i = max_min_index(&clusters.centroids, previous).expect("k >= 1 centroids");
    Ok(clusters.centroids[i].clone())
}

pub struct RefineContext<'a> {
    pub system: &'a TrueSystem<'a>,
    pub bounds: &'a Bounds,
    pub risk: RiskSpec,
    /// Prediction grid in raw coordinates.
    pub grid: &'a [EnvPoint],
    pub gpr: &'a GprConfig,
    /// Number of sequential queries, N2.
    pub steps: usize,
    pub kmeans_restarts: usize,
    pub run_seed: u64,
}

/// Model state after step `k` (step 0 is the fit on the initial data).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefineStep {
    pub k: usize,
    pub query: Option<RiskSample>,
    pub hyper: Hyper,
    pub mll: f64,
    pub safe_count: usize,
    /// Mean and variance on the grid, in normalized risk units.
    pub grid: Vec<(f64, f64)>,
}

pub struct RefineOutcome {
    pub model: GprModel,
    pub d1: Vec<RiskSample>,
    pub steps: Vec<RefineStep>,
    /// Reason the loop ended before spending all `steps` queries.
    pub stopped: Option<String>,
}

/// Alternates fitting and max-min querying for `ctx.steps` rounds.
pub fn sequential_refine(ctx: &RefineContext, initial: Vec<RiskSample>, d2: &[RiskSample]) -> Result<RefineOutcome> {
    let grid: Vec<Vec<f64>> = ctx.grid.iter().map(|z| ctx.bounds.normalize(z.coords())).collect();
    let th = ctx.risk.normalized_threshold();
    let data2 = risk_dataset(d2, ctx.bounds, &ctx.risk)?;
    let mut d1 = initial;
    let fit = |d1: &[RiskSample], k: usize| -> Result<(GprModel, RefineStep)> {
        let data1 = risk_dataset(d1, ctx.bounds, &ctx.risk)?;
        let (model, rep) = GprModel::fit(&data1, &data2, ctx.gpr, ctx.run_seed, k as u64)?;
        let preds = model.predict_batch(&grid);
        let step = RefineStep {
            k,
            query: None,
            hyper: model.hyper.clone(),
            mll: rep.starts[rep.best].fitted_mll,
            safe_count: preds.iter().filter(|(m, _)| *m < th).count(),
            grid: preds,
        };
        Ok((model, step))
    };
    let (mut model, step0) = fit(&d1, 0)?;
    let mut steps = vec![step0];
    let mut stopped = None;
    for k in 1..=ctx.steps {
        let region = match safe_region(&model, &grid, th) {
            Ok(r) => r,
            Err(e) => {
                stopped = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let pts: Vec<Vec<f64>> = region.iter().map(|&i| ctx.grid[i].0.clone()).collect();
        let previous: Vec<Vec<f64>> = d1.iter().map(|s| s.z.0.clone()).collect();
        let mut rng = seeded_rng(ctx.run_seed, stage::NEXT_POINT, k as u64);
        let z = next_point(&pts, ctx.steps, &previous, ctx.kmeans_restarts, &mut rng)?;
        let z: Vec<f64> = z
            .iter()
            .zip(ctx.bounds.lower.iter().zip(&ctx.bounds.upper))
            .map(|(x, (lo, hi))| x.clamp(*lo, *hi))
            .collect();
        let sample = ctx.system.query(&[ctx.bounds.point(z)?])?.remove(0);
        d1.push(sample.clone());
        let (m, mut step) = fit(&d1, k)?;
        step.query = Some(sample);
        model = m;
        steps.push(step);
    }
    Ok(RefineOutcome { model, d1, steps, stopped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{Benchmark, SyntheticBenchmark, SyntheticSpec};
    use crate::domain::Budget;
    use crate::falsify::grid_samples;
    use rand::Rng as _;

    fn brute_force(c: &[Vec<f64>], p: &[Vec<f64>]) -> usize {
        let mut order: Vec<usize> = (0..c.len()).collect();
        let score = |i: usize| {
            p.iter().map(|q| (c[i][0] - q[0]).powi(2) + (c[i][1] - q[1]).powi(2)).fold(f64::INFINITY, f64::min)
        };
        order.sort_by(|&a, &b| {
            score(b).total_cmp(&score(a)).then(c[a][0].total_cmp(&c[b][0])).then(c[a][1].total_cmp(&c[b][1]))
        });
        order[0]
    }

    #[test]
    fn max_min_matches_brute_force() {
        let mut rng = seeded_rng(11, 0, 0);
        for _ in 0..100 {
            // Coarse lattice coordinates make exact ties common.
            let mut pt = || vec![rng.random_range(0..5) as f64, rng.random_range(0..5) as f64];
            let c: Vec<Vec<f64>> = (0..20).map(|_| pt()).collect();
            let p: Vec<Vec<f64>> = (0..4).map(|_| pt()).collect();
            assert_eq!(max_min_index(&c, &p), Some(brute_force(&c, &p)));
        }
    }

    #[test]
    fn max_min_without_history_takes_smallest() {
        let c = vec![vec![1.0, 0.0], vec![0.0, 5.0], vec![0.0, 2.0]];
        assert_eq!(max_min_index(&c, &[]), Some(2));
        assert_eq!(max_min_index(&[], &c), None);
        let c = vec![vec![0.0, 0.0], vec![10.0, 10.0]];
        assert_eq!(max_min_index(&c, &[vec![1.0, 1.0]]), Some(1));
    }

    #[test]
    fn next_point_is_farthest_centroid() {
        let region = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0]];
        let z = next_point(&region, 2, &[vec![0.0, 0.1]], 10, &mut seeded_rng(0, 0, 0)).unwrap();
        assert!((z[0] - 5.05).abs() < 1e-12 && (z[1] - 5.0).abs() < 1e-12);
        // k shrinks to the region size.
        let z = next_point(&region[..1], 5, &[], 10, &mut seeded_rng(0, 0, 0)).unwrap();
        assert_eq!(z, region[0]);
    }

    #[test]
    fn safe_region_thresholds_the_mean() {
        let d = Dataset::new(vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![1.0, -1.0]).unwrap();
        let h = Hyper { signal_var: 1.0, lengthscales: vec![0.2, 0.2], noise_var: 1e-6 };
        let m = GprModel::condition(&d, h, 1.0).unwrap();
        let grid = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.5, 0.5]];
        assert_eq!(safe_region(&m, &grid, 0.0).unwrap(), vec![1, 2]);
        assert!(matches!(safe_region(&m, &grid[..1], 0.0), Err(Error::EmptySafeRegion { .. })));
        assert_eq!(safe_region(&m, &grid, f64::INFINITY).unwrap(), vec![0, 1, 2]);
        assert!(safe_region(&m, &grid, f64::NEG_INFINITY).is_err());
        let brute: Vec<usize> = (0..3).filter(|&i| m.predict(&grid[i]).0 < 0.5).collect();
        assert_eq!(safe_region(&m, &grid, 0.5).unwrap(), brute);
    }

    #[test]
    fn refine_spends_exactly_the_sequential_budget() {
        let bounds = Bounds::cube(100.0, 500.0, 2).unwrap();
        let bench = SyntheticBenchmark::new(SyntheticSpec::default(), bounds.clone()).unwrap();
        let budget = Budget::new(6, 3).unwrap();
        let system = TrueSystem { bench: &bench, budget: &budget, run_seed: 3 };
        let grid: Vec<EnvPoint> = grid_samples(&bounds, 8).unwrap();
        let risk = RiskSpec::raw(0.3);
        let model_data: Vec<RiskSample> = grid
            .iter()
            .step_by(5)
            .map(|z| {
                let r = bench.simulate_model(z, Default::default(), 0);
                RiskSample::new(z.clone(), bench.risk(z, &r), crate::Source::Model).unwrap()
            })
            .collect();
        let init = system.query(&grid[10..13]).unwrap();
        let cfg = GprConfig { starts: 2, iterations: 60, ..GprConfig::default() };
        let ctx = RefineContext {
            system: &system,
            bounds: &bounds,
            risk,
            grid: &grid,
            gpr: &cfg,
            steps: budget.sequential(),
            kmeans_restarts: 5,
            run_seed: 3,
        };
        let out = sequential_refine(&ctx, init, &model_data).unwrap();
        if out.stopped.is_none() {
            assert_eq!(budget.used(), 6);
            assert_eq!(out.d1.len(), 6);
            assert_eq!(out.steps.len(), 4);
        }
        assert!(out.steps.iter().skip(1).all(|s| s.query.is_some()));
        assert!(out.steps.iter().all(|s| s.grid.len() == grid.len()));
        assert!(ctx.system.query(&grid[..1]).is_err() || out.stopped.is_some());
    }
}
