use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Class, FlowModel};
use crate::domain::Bounds;
use crate::error::{Error, Result};
use crate::rng::{seeded_rng, stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop when the best loss improved by less than `min_improvement`
    /// over the last `patience` epochs.
    pub patience: usize,
    pub min_improvement: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 32,
            learning_rate: 1e-3,
            epochs: 2000,
            patience: 50,
            min_improvement: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Labelled points with per-point loss weights inversely proportional to
/// class size, normalized to sum to one.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub z: DMatrix<f64>,
    pub classes: Vec<Class>,
    pub weights: Vec<f64>,
}

impl TrainingSet {
    pub fn new(points: &[Vec<f64>], classes: &[Class]) -> Result<Self> {
        if points.len() != classes.len() || points.is_empty() {
            return Err(Error::InvalidInput("need one class per point and at least one point".into()));
        }
        let counts = [Class::Risk, Class::Safe].map(|c| classes.iter().filter(|&&k| k == c).count());
        if counts.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "flow training needs both classes, got {} risk and {} safe",
                counts[0], counts[1]
            )));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d || p.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidInput("training points must be finite and of equal dimension".into()));
        }
        let raw: Vec<f64> = classes.iter().map(|c| 1.0 / counts[c.index()] as f64).collect();
        let total: f64 = raw.iter().sum();
        Ok(Self {
            z: DMatrix::from_fn(d, points.len(), |r, c| points[c][r]),
            classes: classes.to_vec(),
            weights: raw.into_iter().map(|w| w / total).collect(),
        })
    }
}

/// Weighted negative class-conditional log-likelihood and its gradient.
pub fn loss_and_grad(model: &FlowModel, data: &TrainingSet) -> (f64, Vec<f64>) {
    let mix = &model.mixture;
    let d = model.flow.dim() as f64;
    let norm = 0.5 * d * (2.0 * std::f64::consts::PI * mix.variance).ln();
    model.flow.inverse_with_grad(&data.z, |w, logdet| {
        let n = w.ncols();
        let mut g = DMatrix::zeros(w.nrows(), n);
        let mut g_ld = DVector::zeros(n);
        let mut loss = 0.0;
        for i in 0..n {
            let mu = mix.mean(data.classes[i]);
            let om = data.weights[i];
            let mut sq = 0.0;
            for (r, m) in mu.iter().enumerate() {
                let diff = w[(r, i)] - m;
                sq += diff * diff;
                g[(r, i)] = om * diff / mix.variance;
            }
            loss += om * (0.5 * sq / mix.variance + norm - logdet[i]);
            g_ld[i] = -om;
        }
        (loss, g, g_ld)
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss before each parameter update.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub stopped_early: bool,
}

/// Adam on the full batch, starting from `model`.
pub fn fit(model: &mut FlowModel, data: &TrainingSet, cfg: &FlowConfig) -> Result<TrainReport> {
    let n = model.flow.params().len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut best_at: Vec<f64> = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = loss_and_grad(model, data);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        report.losses.push(loss);
        best = best.min(loss);
        best_at.push(best);
        if epoch >= cfg.patience && best_at[epoch - cfg.patience] - best < cfg.min_improvement {
            report.stopped_early = true;
            break;
        }
        let t = (epoch + 1) as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((p, g), (mi, vi)) in model.flow.params_mut().iter_mut().zip(&grad).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + cfg.epsilon);
        }
    }
    report.final_loss = loss_and_grad(model, data).0;
    if !report.final_loss.is_finite() {
        return Err(Error::TrainingDiverged { epoch: report.losses.len() });
    }
    Ok(report)
}

/// Initializes a flow from `seed` and trains it on `data`.
pub fn train_flow(
    bounds: &Bounds,
    data: &TrainingSet,
    cfg: &FlowConfig,
    seed: u64,
) -> Result<(FlowModel, TrainReport)> {
    let mut model = FlowModel::new(bounds, cfg.layers, cfg.hidden, &mut seeded_rng(seed, stage::FLOW_INIT, 0))?;
    let report = fit(&mut model, data, cfg)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(seed: u64) -> (Bounds, Vec<Vec<f64>>, Vec<Class>) {
        let mut rng = seeded_rng(seed, 0, 0);
        let std = 0.2;
        let mut pts = Vec::new();
        let mut cls = Vec::new();
        for (cx, c) in [(1.5, Class::Risk), (2.5, Class::Safe)] {
            for _ in 0..100 {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                pts.push(vec![cx + std * a, 2.0 + std * b]);
                cls.push(c);
            }
        }
        (Bounds::cube(0.0, 4.0, 2).unwrap(), pts, cls)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Worst relative error between the analytic gradient and a five-point
    /// central-difference stencil.
    fn check_gradients(model: &FlowModel, data: &TrainingSet) -> f64 {
        let (_, grad) = loss_and_grad(model, data);
        let mut worst: f64 = 0.0;
        let mut probe = model.clone();
        for (k, &g) in grad.iter().enumerate() {
            let p0 = probe.flow.params()[k];
            let h = 1e-3;
            let mut at = |x: f64| {
                probe.flow.params_mut()[k] = x;
                loss_and_grad(&probe, data).0
            };
            let fd = (at(p0 - 2.0 * h) - 8.0 * at(p0 - h) + 8.0 * at(p0 + h) - at(p0 + 2.0 * h)) / (12.0 * h);
            probe.flow.params_mut()[k] = p0;
            worst = worst.max(rel_err(g, fd));
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (b, pts, cls) = blobs(1);
        let data = TrainingSet::new(&pts, &cls).unwrap();
        let cfg = FlowConfig { layers: 4, hidden: 8, epochs: 50, ..FlowConfig::default() };
        let mut model = FlowModel::new(&b, cfg.layers, cfg.hidden, &mut seeded_rng(0, 2, 0)).unwrap();
        assert!(check_gradients(&model, &data) < 1e-4);
        fit(&mut model, &data, &cfg).unwrap();
        assert!(check_gradients(&model, &data) < 1e-4);
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let (b, pts, cls) = blobs(2);
        let data = TrainingSet::new(&pts, &cls).unwrap();
        let cfg = FlowConfig { epochs: 0, ..FlowConfig::default() };
        let (m, rep) = train_flow(&b, &data, &cfg, 3).unwrap();
        let fresh = FlowModel::new(&b, cfg.layers, cfg.hidden, &mut seeded_rng(3, stage::FLOW_INIT, 0)).unwrap();
        assert_eq!(m, fresh);
        assert!(rep.losses.is_empty());
    }

    #[test]
    fn imbalanced_weights_sum_to_one_per_class_half() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
        let mut cls = vec![Class::Safe; 10];
        cls[0] = Class::Risk;
        let d = TrainingSet::new(&pts, &cls).unwrap();
        assert!((d.weights[0] - 0.5).abs() < 1e-15);
        assert!((d.weights[1..].iter().sum::<f64>() - 0.5).abs() < 1e-15);
        assert!(TrainingSet::new(&pts, &[Class::Safe; 10]).is_err());
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (b, pts, cls) = blobs(4);
        let data = TrainingSet::new(&pts, &cls).unwrap();
        let cfg = FlowConfig { epochs: 300, ..FlowConfig::default() };
        let (m, rep) = train_flow(&b, &data, &cfg, 0).unwrap();
        let hits = m.classify_batch(&pts).iter().zip(&cls).filter(|(c, k)| c.class == **k).count();
        assert!(hits as f64 / pts.len() as f64 >= 0.95, "accuracy {hits}/200");
        assert!(rep.final_loss < rep.losses[0]);
        let mut rng = seeded_rng(9, 0, 0);
        for _ in 0..100 {
            let z = [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)];
            let (w, _) = m.inverse(&z);
            let back = m.forward(&w);
            assert!((back[0] - z[0]).abs().max((back[1] - z[1]).abs()) < 1e-9);
        }
    }
}
