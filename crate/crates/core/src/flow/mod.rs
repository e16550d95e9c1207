//! Flow-GMM classifier: an affine coupling flow `g` from a latent space to
//! the search space, with one fixed isotropic Gaussian per class in the
//! latent space.
//!
//! Conventions: `forward` maps latent `w` to `z = g(w)`; `inverse` maps `z`
//! to `w = g^-1(z)` and returns `log |det dg^-1/dz|`. Training and
//! classification run in the inverse direction.

mod net;
mod train;

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::Bounds;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub use net::CouplingFlow;
pub use train::{fit, loss_and_grad, train_flow, FlowConfig, TrainReport, TrainingSet};

/// Class 1 is the model-risk region, class 2 everything else.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Risk,
    Safe,
}

impl Class {
    pub fn index(self) -> usize {
        match self {
            Class::Risk => 0,
            Class::Safe => 1,
        }
    }
}

/// Two fixed latent Gaussians `N(mu_i, s^2 I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMixture {
    pub means: [Vec<f64>; 2],
    pub variance: f64,
}

impl LatentMixture {
    /// Means at `(+3, 0, ...)` for the risk class and `(-3, 0, ...)` for the
    /// safe class, unit variance.
    pub fn standard(dim: usize) -> Self {
        let mut m1 = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        m1[0] = 3.0;
        m2[0] = -3.0;
        Self { means: [m1, m2], variance: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) || self.means[0] == self.means[1] || self.means[0].len() != self.means[1].len() {
            return Err(Error::InvalidInput("latent mixture needs distinct means and positive variance".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean(&self, class: Class) -> &[f64] {
        &self.means[class.index()]
    }

    pub fn log_density(&self, class: Class, w: &[f64]) -> f64 {
        let mu = self.mean(class);
        let d2: f64 = w.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
        -0.5 * d2 / self.variance - 0.5 * w.len() as f64 * (2.0 * std::f64::consts::PI * self.variance).ln()
    }
}

/// A flow paired with its latent mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub flow: CouplingFlow,
    pub mixture: LatentMixture,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub class: Class,
    /// Log posteriors `[risk, safe]` under equal class priors.
    pub log_posterior: [f64; 2],
}

impl FlowModel {
    pub fn new(bounds: &Bounds, layers: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let flow = CouplingFlow::new(bounds, layers, hidden, rng)?;
        let mixture = LatentMixture::standard(bounds.dim());
        Ok(Self { flow, mixture })
    }

    pub fn forward(&self, w: &[f64]) -> Vec<f64> {
        self.flow.forward(w)
    }

    pub fn inverse(&self, z: &[f64]) -> (Vec<f64>, f64) {
        self.flow.inverse(z)
    }

    /// Argmax class with ties going to the risk class.
    pub fn classify(&self, z: &[f64]) -> Classification {
        let (w, _) = self.flow.inverse(z);
        classify_latent(&self.mixture, &w)
    }

    /// Classifies many points at once (columns of `zs`).
    pub fn classify_batch(&self, zs: &[Vec<f64>]) -> Vec<Classification> {
        if zs.is_empty() {
            return Vec::new();
        }
        let d = self.flow.dim();
        let x = DMatrix::from_fn(d, zs.len(), |r, c| zs[c][r]);
        let (w, _) = self.flow.inverse_batch(&x);
        w.column_iter().map(|col| classify_latent(&self.mixture, col.as_slice())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.flow.validate()?;
        m.mixture.validate()?;
        if m.mixture.dim() != m.flow.dim() {
            return Err(Error::InvalidInput("checkpoint mixture and flow dimensions differ".into()));
        }
        Ok(m)
    }
}

fn classify_latent(mixture: &LatentMixture, w: &[f64]) -> Classification {
    let l1 = mixture.log_density(Class::Risk, w);
    let l2 = mixture.log_density(Class::Safe, w);
    let m = l1.max(l2);
    let lse = m + ((l1 - m).exp() + (l2 - m).exp()).ln();
    let class = if l1 >= l2 { Class::Risk } else { Class::Safe };
    Classification { class, log_posterior: [l1 - lse, l2 - lse] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng as _;

    fn model() -> FlowModel {
        let b = Bounds::new(vec![0.5, 0.5], vec![4.5, 6.5]).unwrap();
        FlowModel::new(&b, 6, 32, &mut seeded_rng(0, 2, 0)).unwrap()
    }

    #[test]
    fn fresh_flow_is_whitening_only() {
        let m = model();
        let (w, logdet) = m.inverse(&[2.5, 3.5]);
        assert!(w.iter().all(|x| x.abs() < 1e-15));
        let (w, _) = m.inverse(&[4.5, 0.5]);
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] + 0.5).abs() < 1e-15);
        assert!((logdet - (-(4.0f64).ln() - (6.0f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn class_mean_and_tie_break() {
        let m = model();
        let z = m.forward(&m.mixture.means[1]);
        assert_eq!(m.classify(&z).class, Class::Safe);
        let z = m.forward(&m.mixture.means[0]);
        assert_eq!(m.classify(&z).class, Class::Risk);
        let mid = m.forward(&[0.0, 0.7]);
        let c = m.classify(&mid);
        assert_eq!(c.class, Class::Risk);
        assert!((c.log_posterior[0] - c.log_posterior[1]).abs() < 1e-12);
    }

    #[test]
    fn classification_ignores_common_likelihood_scaling() {
        let m = model();
        let mut rng = seeded_rng(5, 0, 0);
        let wide = LatentMixture { variance: 4.0, ..m.mixture.clone() };
        for _ in 0..200 {
            let w = [rng.random_range(-6.0..6.0), rng.random_range(-3.0..3.0)];
            // Shifting both log-likelihoods by the same constant cannot move the argmax.
            let a = classify_latent(&m.mixture, &w);
            let l1 = m.mixture.log_density(Class::Risk, &w) + 7.5;
            let l2 = m.mixture.log_density(Class::Safe, &w) + 7.5;
            assert_eq!(a.class, if l1 >= l2 { Class::Risk } else { Class::Safe });
            // Equal isotropic variances: the boundary is the bisecting hyperplane.
            assert_eq!(classify_latent(&wide, &w).class, a.class);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flow.json");
        m.save(&p).unwrap();
        assert_eq!(FlowModel::load(&p).unwrap(), m);
    }
}
