//! Discrete LQR for the speed+steering path-tracking error dynamics.
//!
//! Error state: `[e, de, th_e, dth_e, v - v_ref]`, input: `[delta, a]`.

use nalgebra::{Complex, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat5 = SMatrix<f64, 5, 5>;
pub type Mat5x2 = SMatrix<f64, 5, 2>;
pub type Mat2x5 = SMatrix<f64, 2, 5>;
pub type Mat2 = SMatrix<f64, 2, 2>;

/// Diagonal LQR weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrWeights {
    pub q: [f64; 5],
    pub r: [f64; 2],
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self { q: [1.0; 5], r: [1.0; 2] }
    }
}

impl LqrWeights {
    pub fn q_matrix(&self) -> Mat5 {
        Mat5::from_diagonal(&self.q.into())
    }

    pub fn r_matrix(&self) -> Mat2 {
        Mat2::from_diagonal(&self.r.into())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RiccatiOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self { tolerance: 1e-9, max_iterations: 1000 }
    }
}

#[derive(Clone, Debug)]
pub struct LqrSolution {
    pub gain: Mat2x5,
    pub cost_to_go: Mat5,
    pub residual: f64,
    pub iterations: usize,
}

/// Linearized error dynamics at speed `v` for wheelbase `wheelbase`.
pub fn error_dynamics(v: f64, wheelbase: f64, dt: f64) -> (Mat5, Mat5x2) {
    let mut a = Mat5::zeros();
    a[(0, 0)] = 1.0;
    a[(0, 1)] = dt;
    a[(1, 2)] = v;
    a[(2, 2)] = 1.0;
    a[(2, 3)] = dt;
    a[(4, 4)] = 1.0;
    let mut b = Mat5x2::zeros();
    b[(3, 0)] = v / wheelbase;
    b[(4, 1)] = dt;
    (a, b)
}

fn riccati_map(a: &Mat5, b: &Mat5x2, q: &Mat5, r: &Mat2, p: &Mat5) -> Option<Mat5> {
    let at_p = a.transpose() * p;
    let s = r + b.transpose() * p * b;
    let s_inv = s.try_inverse()?;
    let next = at_p * a - at_p * b * s_inv * b.transpose() * p * a + q;
    // Keep the iterate exactly symmetric.
    Some((next + next.transpose()) * 0.5)
}

fn max_abs(m: &Mat5) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Fixed-point residual `max |map(P) - P|` of the Riccati recursion.
pub fn riccati_residual(a: &Mat5, b: &Mat5x2, q: &Mat5, r: &Mat2, p: &Mat5) -> f64 {
    riccati_map(a, b, q, r, p).map_or(f64::INFINITY, |next| max_abs(&(next - p)))
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration.
pub fn solve_dare(a: &Mat5, b: &Mat5x2, q: &Mat5, r: &Mat2, opts: RiccatiOptions) -> Result<(Mat5, f64, usize)> {
    let mut p = *q;
    let mut residual = f64::INFINITY;
    for it in 0..opts.max_iterations {
        let next = riccati_map(a, b, q, r, &p)
            .ok_or(Error::RiccatiNonConvergence { residual: f64::INFINITY, iterations: it })?;
        residual = max_abs(&(next - p));
        if !residual.is_finite() {
            break;
        }
        if residual < opts.tolerance {
            return Ok((p, residual, it));
        }
        p = next;
    }
    Err(Error::RiccatiNonConvergence { residual, iterations: opts.max_iterations })
}

/// LQR state-feedback gain `K` (control law `u = -K x`) for tracking at `v_ref`.
pub fn lqr_gain(
    v_ref: f64,
    wheelbase: f64,
    dt: f64,
    weights: &LqrWeights,
    opts: RiccatiOptions,
) -> Result<LqrSolution> {
    if !(v_ref > 0.0) {
        return Err(Error::InvalidInput(format!("LQR design speed must be positive, got {v_ref}")));
    }
    let (a, b) = error_dynamics(v_ref, wheelbase, dt);
    let q = weights.q_matrix();
    let r = weights.r_matrix();
    let (p, residual, iterations) = solve_dare(&a, &b, &q, &r, opts)?;
    let s = r + b.transpose() * p * b;
    let gain = s.try_inverse().ok_or(Error::RiccatiNonConvergence { residual, iterations })? * b.transpose() * p * a;
    Ok(LqrSolution { gain, cost_to_go: p, residual, iterations })
}

/// Spectral radius of the closed loop `A - B K`.
pub fn closed_loop_spectral_radius(a: &Mat5, b: &Mat5x2, gain: &Mat2x5) -> f64 {
    let cl = a - b * gain;
    cl.complex_eigenvalues().iter().map(|c: &Complex<f64>| c.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    const L: f64 = 0.8;
    const DT: f64 = 0.1;

    #[test]
    fn returned_solution_is_a_fixed_point() {
        for &v in &[0.5, 2.0, 4.0, 6.5] {
            let sol = lqr_gain(v, L, DT, &LqrWeights::default(), RiccatiOptions::default()).unwrap();
            let (a, b) = error_dynamics(v, L, DT);
            let w = LqrWeights::default();
            let res = riccati_residual(&a, &b, &w.q_matrix(), &w.r_matrix(), &sol.cost_to_go);
            assert!(res < 1e-9, "v = {v}: residual {res}");
        }
    }

    #[test]
    fn closed_loop_is_stable() {
        for &v in &[0.5, 1.0, 3.0, 6.5] {
            let sol = lqr_gain(v, L, DT, &LqrWeights::default(), RiccatiOptions::default()).unwrap();
            let (a, b) = error_dynamics(v, L, DT);
            let rho = closed_loop_spectral_radius(&a, &b, &sol.gain);
            assert!(rho < 1.0, "v = {v}: spectral radius {rho}");
        }
    }

    #[test]
    fn gain_is_invariant_to_joint_weight_scaling() {
        let w = LqrWeights { q: [1.0, 0.5, 2.0, 1.0, 3.0], r: [1.0, 0.7] };
        let w2 = LqrWeights { q: w.q.map(|x| 2.0 * x), r: w.r.map(|x| 2.0 * x) };
        let k1 = lqr_gain(3.0, L, DT, &w, RiccatiOptions::default()).unwrap().gain;
        let k2 = lqr_gain(3.0, L, DT, &w2, RiccatiOptions::default()).unwrap().gain;
        assert!((k1 - k2).abs().max() < 1e-8);
    }

    #[test]
    fn rejects_nonpositive_speed_and_reports_nonconvergence() {
        assert!(lqr_gain(0.0, L, DT, &LqrWeights::default(), RiccatiOptions::default()).is_err());
        let tight = RiccatiOptions { tolerance: 1e-9, max_iterations: 2 };
        assert!(matches!(
            lqr_gain(3.0, L, DT, &LqrWeights::default(), tight),
            Err(Error::RiccatiNonConvergence { .. })
        ));
    }
}
