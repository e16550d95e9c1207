//! Gaussian-process risk predictor with an anisotropic RBF kernel.
//!
//! Hyperparameters are fitted by maximizing the sum of two marginal log
//! likelihoods, one over the true-system data and one over the model data,
//! with shared hyperparameters. Predictions condition on both datasets
//! pooled. The prior mean is zero in risk units; targets are only rescaled
//! by their root mean square, so far from data the predictor reverts to
//! "no risk".

mod sequential;

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded_rng, stage};

pub use sequential::{
    max_min_index, next_point, risk_dataset, safe_region, sequential_refine, RefineContext, RefineOutcome, RefineStep,
};

const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Kernel hyperparameters: signal variance `s^2`, per-axis lengthscales and
/// observation noise variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

impl Hyper {
    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `[log s^2, log l_1, ..., log l_d, log noise]`.
    pub fn to_log(&self) -> Vec<f64> {
        let mut v = vec![self.signal_var.ln()];
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v.push(self.noise_var.ln());
        v
    }

    pub fn from_log(theta: &[f64]) -> Self {
        let d = theta.len() - 2;
        Self {
            signal_var: theta[0].exp(),
            lengthscales: theta[1..=d].iter().map(|t| t.exp()).collect(),
            noise_var: theta[d + 1].exp(),
        }
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let q: f64 = a.iter().zip(b).zip(&self.lengthscales).map(|((x, y), l)| (x - y) * (x - y) / (l * l)).sum();
        self.signal_var * (-0.5 * q).exp()
    }
}

/// Inputs and targets of one data source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvalidInput(format!("{} inputs but {} targets", x.len(), y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("GP data must be finite".into()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut x = self.x.clone();
        x.extend(other.x.iter().cloned());
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Dataset { x, y }
    }

    fn scaled(&self, s: f64) -> Dataset {
        Dataset { x: self.x.clone(), y: self.y.iter().map(|v| v / s).collect() }
    }
}

fn gram(x: &[Vec<f64>], h: &Hyper) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = h.kernel(&x[i], &x[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + noise I`, retrying with jitter 1e-10 .. 1e-6 on the
/// diagonal. Returns the factor and the jitter used.
pub fn factor(k_noise_free: &DMatrix<f64>, noise_var: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    for &j in &JITTERS {
        let mut k = k_noise_free.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += noise_var + j;
        }
        if let Some(c) = Cholesky::new(k) {
            return Ok((c, j));
        }
    }
    Err(Error::NotPositiveDefinite { jitter: JITTERS[JITTERS.len() - 1] })
}

fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Marginal log likelihood `log p(y | X, hyper)` under a zero-mean prior.
pub fn mll(data: &Dataset, hyper: &Hyper) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("marginal likelihood of an empty dataset".into()));
    }
    let (c, _) = factor(&gram(&data.x, hyper), hyper.noise_var)?;
    let y = DVector::from_column_slice(&data.y);
    let alpha = c.solve(&y);
    Ok(-0.5 * y.dot(&alpha) - 0.5 * log_det(&c) - 0.5 * data.len() as f64 * (2.0 * PI).ln())
}

/// Marginal log likelihood and its gradient in log-hyperparameter space
/// (ordering as in [`Hyper::to_log`]).
pub fn mll_grad(data: &Dataset, hyper: &Hyper) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::InvalidInput("marginal likelihood of an empty dataset".into()));
    }
    let n = data.len();
    let d = hyper.dim();
    let kf = gram(&data.x, hyper);
    let (c, _) = factor(&kf, hyper.noise_var)?;
    let y = DVector::from_column_slice(&data.y);
    let alpha = c.solve(&y);
    let value = -0.5 * y.dot(&alpha) - 0.5 * log_det(&c) - 0.5 * n as f64 * (2.0 * PI).ln();
    // dL/dK = (alpha alpha^T - K^-1) / 2
    let w = &alpha * alpha.transpose() - c.inverse();
    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let wk = w[(i, j)] * kf[(i, j)];
            grad[0] += wk;
            for (a, l) in hyper.lengthscales.iter().enumerate() {
                let diff = data.x[i][a] - data.x[j][a];
                grad[1 + a] += wk * diff * diff / (l * l);
            }
        }
        grad[d + 1] += w[(i, i)] * hyper.noise_var;
    }
    for g in &mut grad {
        *g *= 0.5;
    }
    Ok((value, grad))
}

/// `mll(D1) + mll(D2)` with shared hyperparameters; an empty dataset adds 0.
pub fn joint_mll(d1: &Dataset, d2: &Dataset, hyper: &Hyper) -> Result<f64> {
    joint_mll_grad(d1, d2, hyper).map(|(v, _)| v)
}

pub fn joint_mll_grad(d1: &Dataset, d2: &Dataset, hyper: &Hyper) -> Result<(f64, Vec<f64>)> {
    if d1.is_empty() && d2.is_empty() {
        return Err(Error::InvalidInput("both datasets are empty".into()));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; hyper.dim() + 2];
    for data in [d1, d2] {
        if data.is_empty() {
            continue;
        }
        let (v, g) = mll_grad(data, hyper)?;
        value += v;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GprConfig {
    pub starts: usize,
    pub iterations: usize,
    /// Convergence when the projected gradient's max-norm drops below this.
    pub gradient_tolerance: f64,
    pub signal_var_range: (f64, f64),
    pub lengthscale_range: (f64, f64),
    pub noise_var_range: (f64, f64),
    /// Holds the noise variance at this value instead of fitting it.
    pub fixed_noise: Option<f64>,
    /// Divide targets by their root mean square before fitting.
    pub scale_targets: bool,
    /// First start: `[signal_var, lengthscale, noise_var]`.
    pub initial: (f64, f64, f64),
}

impl Default for GprConfig {
    fn default() -> Self {
        Self {
            starts: 8,
            iterations: 500,
            gradient_tolerance: 1e-6,
            signal_var_range: (1e-2, 1e2),
            lengthscale_range: (0.03, 3.0),
            noise_var_range: (1e-8, 1e-1),
            fixed_noise: None,
            scale_targets: true,
            initial: (1.0, 0.3, 1e-4),
        }
    }
}

impl GprConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if self.starts == 0 || !ok(self.signal_var_range) || !ok(self.lengthscale_range) || !ok(self.noise_var_range) {
            return Err(Error::Config("GPR needs starts >= 1 and positive, ordered hyperparameter ranges".into()));
        }
        if let Some(n) = self.fixed_noise {
            if !(n > 0.0) {
                return Err(Error::Config(format!("fixed noise must be positive, got {n}")));
            }
        }
        Ok(())
    }

    fn log_box(&self, d: usize) -> Vec<(f64, f64)> {
        let lg = |(a, b): (f64, f64)| (a.ln(), b.ln());
        let mut v = vec![lg(self.signal_var_range)];
        v.extend(std::iter::repeat_n(lg(self.lengthscale_range), d));
        v.push(match self.fixed_noise {
            Some(n) => (n.ln(), n.ln()),
            None => lg(self.noise_var_range),
        });
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub initial: Hyper,
    pub initial_mll: f64,
    pub fitted: Hyper,
    pub fitted_mll: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub starts: Vec<StartRecord>,
    pub best: usize,
    pub target_scale: f64,
}

/// Projected gradient ascent with backtracking inside a log-space box.
fn ascend(
    d1: &Dataset,
    d2: &Dataset,
    start: Vec<f64>,
    bx: &[(f64, f64)],
    cfg: &GprConfig,
) -> (Vec<f64>, f64, usize, bool) {
    let clip = |t: &mut Vec<f64>| {
        for (v, (lo, hi)) in t.iter_mut().zip(bx) {
            *v = v.clamp(*lo, *hi);
        }
    };
    let eval = |t: &[f64]| joint_mll_grad(d1, d2, &Hyper::from_log(t)).ok().filter(|(v, _)| v.is_finite());
    let mut theta = start;
    clip(&mut theta);
    let Some((mut f, mut g)) = eval(&theta) else {
        return (theta, f64::NEG_INFINITY, 0, false);
    };
    let mut step = 0.5;
    for it in 0..cfg.iterations {
        // Zero the components that push against an active bound.
        let pg: Vec<f64> = g
            .iter()
            .zip(theta.iter().zip(bx))
            .map(
                |(gi, (t, (lo, hi)))| {
                    if (*t <= *lo && *gi < 0.0) || (*t >= *hi && *gi > 0.0) || lo == hi {
                        0.0
                    } else {
                        *gi
                    }
                },
            )
            .collect();
        let norm = pg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if norm < cfg.gradient_tolerance {
            return (theta, f, it, true);
        }
        let mut moved = false;
        while step > 1e-12 {
            let mut cand: Vec<f64> = theta.iter().zip(&pg).map(|(t, gi)| t + step * gi / norm).collect();
            clip(&mut cand);
            match eval(&cand) {
                Some((fc, gc)) if fc > f => {
                    theta = cand;
                    f = fc;
                    g = gc;
                    step = (step * 1.5).min(2.0);
                    moved = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !moved {
            return (theta, f, it, true);
        }
    }
    (theta, f, cfg.iterations, false)
}

/// Fitted GP conditioned on the pooled data.
#[derive(Clone, Debug)]
pub struct GprModel {
    pub hyper: Hyper,
    pub target_scale: f64,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Serializable form of a [`GprModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GprRecord {
    pub hyper: Hyper,
    pub target_scale: f64,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl GprModel {
    /// Conditions on `data` (raw targets) with fixed hyperparameters; the
    /// hyperparameters are in units of `target_scale`.
    pub fn condition(data: &Dataset, hyper: Hyper, target_scale: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("cannot condition a GP on no data".into()));
        }
        let (chol, jitter) = factor(&gram(&data.x, &hyper), hyper.noise_var)?;
        let ys = DVector::from_iterator(data.len(), data.y.iter().map(|v| v / target_scale));
        let alpha = chol.solve(&ys);
        Ok(Self { hyper, target_scale, x: data.x.clone(), y: data.y.clone(), jitter, chol, alpha })
    }

    /// Multi-start maximization of `joint_mll(D1, D2)`, then conditioning on
    /// `D1 + D2`. Start 0 is `cfg.initial`; the others are uniform in the
    /// log-space box, drawn from stream `(run_seed, GPR_STARTS, stream)`.
    pub fn fit(d1: &Dataset, d2: &Dataset, cfg: &GprConfig, run_seed: u64, stream: u64) -> Result<(Self, FitReport)> {
        cfg.validate()?;
        let pooled = d1.concat(d2);
        if pooled.len() < 2 {
            return Err(Error::NotEnoughPoints { needed: 2, available: pooled.len() });
        }
        let d = pooled.x[0].len();
        let rms = (pooled.y.iter().map(|v| v * v).sum::<f64>() / pooled.len() as f64).sqrt();
        let scale = if cfg.scale_targets && rms > 0.0 { rms } else { 1.0 };
        let (s1, s2) = (d1.scaled(scale), d2.scaled(scale));
        let bx = cfg.log_box(d);
        let mut rng = seeded_rng(run_seed, stage::GPR_STARTS, stream);
        let mut starts = vec![Hyper {
            signal_var: cfg.initial.0,
            lengthscales: vec![cfg.initial.1; d],
            noise_var: cfg.fixed_noise.unwrap_or(cfg.initial.2),
        }
        .to_log()];
        for _ in 1..cfg.starts {
            starts.push(bx.iter().map(|(lo, hi)| if lo == hi { *lo } else { rng.random_range(*lo..*hi) }).collect());
        }
        let records: Vec<StartRecord> = starts
            .into_par_iter()
            .map(|t0| {
                let mut t0c = t0.clone();
                for (v, (lo, hi)) in t0c.iter_mut().zip(&bx) {
                    *v = v.clamp(*lo, *hi);
                }
                let initial_mll = joint_mll(&s1, &s2, &Hyper::from_log(&t0c)).unwrap_or(f64::NEG_INFINITY);
                let (t, f, iterations, converged) = ascend(&s1, &s2, t0c.clone(), &bx, cfg);
                StartRecord {
                    initial: Hyper::from_log(&t0c),
                    initial_mll,
                    fitted: Hyper::from_log(&t),
                    fitted_mll: f,
                    iterations,
                    converged,
                }
            })
            .collect();
        let best = (0..records.len())
            .filter(|&i| records[i].fitted_mll.is_finite())
            .fold(None, |b: Option<usize>, i| match b {
                Some(j) if records[j].fitted_mll >= records[i].fitted_mll => Some(j),
                _ => Some(i),
            })
            .ok_or(Error::NotPositiveDefinite { jitter: JITTERS[JITTERS.len() - 1] })?;
        let model = Self::condition(&pooled, records[best].fitted.clone(), scale)?;
        Ok((model, FitReport { starts: records, best, target_scale: scale }))
    }

    pub fn record(&self) -> GprRecord {
        GprRecord { hyper: self.hyper.clone(), target_scale: self.target_scale, x: self.x.clone(), y: self.y.clone() }
    }

    pub fn from_record(r: &GprRecord) -> Result<Self> {
        Self::condition(&Dataset::new(r.x.clone(), r.y.clone())?, r.hyper.clone(), r.target_scale)
    }

    /// Posterior mean and variance of the latent function at `z`.
    pub fn predict(&self, z: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.x.len(), self.x.iter().map(|x| self.hyper.kernel(x, z)));
        let mean = ks.dot(&self.alpha);
        let v = self.chol.l_dirty().solve_lower_triangular(&ks).expect("Cholesky factor has a positive diagonal");
        let var = (self.hyper.signal_var - v.norm_squared()).max(0.0);
        (mean * self.target_scale, var * self.target_scale * self.target_scale)
    }

    pub fn predict_batch(&self, zs: &[Vec<f64>]) -> Vec<(f64, f64)> {
        zs.par_iter().map(|z| self.predict(z)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use proptest::prelude::*;

    fn hyper(s: f64, l: [f64; 2], n: f64) -> Hyper {
        Hyper { signal_var: s, lengthscales: l.to_vec(), noise_var: n }
    }

    fn fixture(n: usize, seed: u64) -> Dataset {
        let mut rng = seeded_rng(seed, 0, 0);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let y = x.iter().map(|p| (3.0 * p[0]).sin() + p[1] * p[1]).collect();
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn single_point_closed_form() {
        let d = Dataset::new(vec![vec![0.3, 0.7]], vec![0.0]).unwrap();
        for l in [0.1, 1.0, 7.0] {
            let v = mll(&d, &hyper(1.0, [l, l], 1.0)).unwrap();
            assert!((v - (-0.5 * 2f64.ln() - 0.5 * (2.0 * PI).ln())).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = fixture(15, 1);
        let mut rng = seeded_rng(2, 0, 0);
        for _ in 0..20 {
            let t = vec![
                rng.random_range(-1.0..1.5),
                rng.random_range(-2.0..0.5),
                rng.random_range(-2.0..0.5),
                rng.random_range(-8.0..-1.0),
            ];
            let (_, g) = mll_grad(&d, &Hyper::from_log(&t)).unwrap();
            for k in 0..t.len() {
                let h = 1e-5;
                let mut tp = t.clone();
                let mut tm = t.clone();
                tp[k] += h;
                tm[k] -= h;
                let fd =
                    (mll(&d, &Hyper::from_log(&tp)).unwrap() - mll(&d, &Hyper::from_log(&tm)).unwrap()) / (2.0 * h);
                let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn joint_objective_is_a_sum_not_a_pool() {
        let h = hyper(1.0, [0.5, 0.5], 0.01);
        let d1 = Dataset::new(vec![vec![0.0, 0.0], vec![0.4, 0.1]], vec![1.0, 0.8]).unwrap();
        let d2 = Dataset::new(vec![vec![0.2, 0.0]], vec![-0.5]).unwrap();
        let e = Dataset::default();
        assert_eq!(joint_mll(&d1, &e, &h).unwrap(), mll(&d1, &h).unwrap());
        assert_eq!(joint_mll(&d1, &d2, &h).unwrap(), mll(&d1, &h).unwrap() + mll(&d2, &h).unwrap());
        assert!((joint_mll(&d1, &d2, &h).unwrap() - mll(&d1.concat(&d2), &h).unwrap()).abs() > 1e-3);
        assert!(joint_mll(&e, &e, &h).is_err());
    }

    #[test]
    fn interpolates_at_noise_floor() {
        let d = fixture(25, 3);
        let h = hyper(1.0, [0.2, 0.2], 1e-8);
        let m = GprModel::condition(&d, h, 1.0).unwrap();
        for (x, y) in d.x.iter().zip(&d.y) {
            assert!((m.predict(x).0 - y).abs() < 1e-6);
        }
        // Fitted: the residual at each training input is exactly (noise + jitter) * alpha.
        let cfg = GprConfig { fixed_noise: Some(1e-8), starts: 3, iterations: 100, ..GprConfig::default() };
        let (m, rep) = GprModel::fit(&d, &Dataset::default(), &cfg, 0, 0).unwrap();
        for (i, (x, y)) in d.x.iter().zip(&d.y).enumerate() {
            let expect = (m.hyper.noise_var + m.jitter) * m.alpha[i] * m.target_scale;
            assert!((y - m.predict(x).0 - expect).abs() < 1e-9 * y.abs().max(1.0));
        }
        for s in &rep.starts {
            assert!(rep.starts[rep.best].fitted_mll >= s.initial_mll);
            assert!(s.fitted_mll >= s.initial_mll);
        }
    }

    #[test]
    fn fit_is_deterministic_and_reverts_far_away() {
        let d1 = fixture(8, 4);
        let d2 = fixture(12, 5);
        let cfg = GprConfig { iterations: 150, ..GprConfig::default() };
        let (a, _) = GprModel::fit(&d1, &d2, &cfg, 7, 1).unwrap();
        let (b, _) = GprModel::fit(&d1, &d2, &cfg, 7, 1).unwrap();
        assert_eq!(a.hyper, b.hyper);
        let far = vec![50.0, -40.0];
        let (mean, var) = a.predict(&far);
        let s2 = a.hyper.signal_var * a.target_scale * a.target_scale;
        assert!(mean.abs() < 1e-9 && (var - s2).abs() < 1e-9 * s2);
        for x in d1.x.iter().chain(&d2.x) {
            assert!(a.predict(x).1 <= var);
        }
        let r = GprModel::from_record(&a.record()).unwrap();
        assert_eq!(r.predict(&[0.3, 0.3]), a.predict(&[0.3, 0.3]));
    }

    #[test]
    fn extra_observation_shrinks_variance() {
        let d = fixture(10, 6);
        let h = hyper(1.0, [0.3, 0.3], 1e-4);
        let z = vec![0.55, 0.45];
        let before = GprModel::condition(&d, h.clone(), 1.0).unwrap().predict(&z).1;
        let more = d.concat(&Dataset::new(vec![z.clone()], vec![0.2]).unwrap());
        let after = GprModel::condition(&more, h, 1.0).unwrap().predict(&z).1;
        assert!(after < before);
    }

    #[test]
    fn jitter_rescues_duplicate_points() {
        let d = Dataset::new(vec![vec![0.1, 0.1]; 3], vec![1.0; 3]).unwrap();
        let h = hyper(1.0, [0.3, 0.3], 0.0);
        let m = GprModel::condition(&d, h, 1.0).unwrap();
        assert!(m.jitter > 0.0);
    }

    proptest! {
        #[test]
        fn mll_is_permutation_invariant(seed in 0u64..1000, rot in 0usize..9) {
            let d = fixture(9, seed);
            let mut x = d.x.clone();
            let mut y = d.y.clone();
            x.rotate_left(rot);
            y.rotate_left(rot);
            let h = hyper(0.8, [0.4, 0.2], 1e-3);
            let a = mll(&d, &h).unwrap();
            let b = mll(&Dataset::new(x, y).unwrap(), &h).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }
    }
}
