use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Sinusoidal reference path `y = w sin(2 pi x / wavelength)` sampled on a
/// uniform grid in `x` over `[0, length]`.
#[derive(Clone, Debug)]
pub struct SinePath {
    pub width: f64,
    pub wavelength: f64,
    pub length: f64,
    pub spacing: f64,
    pub goal: [f64; 2],
    xs: Vec<f64>,
    ys: Vec<f64>,
    yaws: Vec<f64>,
    curvatures: Vec<f64>,
    arclength: Vec<f64>,
}

impl SinePath {
    pub fn new(width: f64, wavelength: f64, length: f64, spacing: f64) -> Result<Self> {
        if !(wavelength > 0.0 && length > 0.0 && spacing > 0.0 && spacing < length) || !width.is_finite() {
            return Err(Error::InvalidInput(format!(
                "bad sine path (w={width}, wavelength={wavelength}, length={length}, spacing={spacing})"
            )));
        }
        let n = (length / spacing).round() as usize + 1;
        let k = 2.0 * PI / wavelength;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        let mut yaws = Vec::with_capacity(n);
        let mut curvatures = Vec::with_capacity(n);
        for i in 0..n {
            let x = length * i as f64 / (n - 1) as f64;
            let dy = width * k * (k * x).cos();
            let ddy = -width * k * k * (k * x).sin();
            xs.push(x);
            ys.push(width * (k * x).sin());
            yaws.push(dy.atan2(1.0));
            curvatures.push(ddy / (1.0 + dy * dy).powf(1.5));
        }
        let mut arclength = vec![0.0; n];
        for i in 1..n {
            arclength[i] = arclength[i - 1] + (xs[i] - xs[i - 1]).hypot(ys[i] - ys[i - 1]);
        }
        let goal = [xs[n - 1], ys[n - 1]];
        Ok(Self { width, wavelength, length, spacing, goal, xs, ys, yaws, curvatures, arclength })
    }

    pub fn with_goal(mut self, goal: [f64; 2]) -> Self {
        self.goal = goal;
        self
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.xs[i], self.ys[i]]
    }

    pub fn yaw(&self, i: usize) -> f64 {
        self.yaws[i]
    }

    pub fn curvature(&self, i: usize) -> f64 {
        self.curvatures[i]
    }

    pub fn total_arclength(&self) -> f64 {
        self.arclength[self.len() - 1]
    }

    /// Distance from `p` to the nearest path sample (exact global minimum).
    ///
    /// Samples are sorted by `x`, so `|x - x_i|` bounds the distance from
    /// below and the scan can stop once it exceeds the best found.
    pub fn nearest_distance(&self, p: [f64; 2]) -> f64 {
        let start = self.xs.partition_point(|&x| x < p[0]).min(self.len() - 1);
        let mut best = f64::INFINITY;
        for i in start..self.len() {
            let dx = self.xs[i] - p[0];
            if dx * dx >= best {
                break;
            }
            best = best.min(dx * dx + (self.ys[i] - p[1]).powi(2));
        }
        for i in (0..start).rev() {
            let dx = p[0] - self.xs[i];
            if dx * dx >= best {
                break;
            }
            best = best.min(dx * dx + (self.ys[i] - p[1]).powi(2));
        }
        best.sqrt()
    }

    /// Nearest sample within a forward window starting at `hint`, with the
    /// signed lateral error (positive when the vehicle is left of the path).
    pub fn track(&self, p: [f64; 2], hint: usize, window: usize) -> (usize, f64) {
        let lo = hint.min(self.len() - 1);
        let hi = (lo + window).min(self.len());
        let mut idx = lo;
        let mut best = f64::INFINITY;
        for i in lo..hi {
            let d = (self.xs[i] - p[0]).powi(2) + (self.ys[i] - p[1]).powi(2);
            if d < best {
                best = d;
                idx = i;
            }
        }
        let (tx, ty) = (self.yaws[idx].cos(), self.yaws[idx].sin());
        let (dx, dy) = (p[0] - self.xs[idx], p[1] - self.ys[idx]);
        let cross = tx * dy - ty * dx;
        (idx, best.sqrt().copysign(if cross == 0.0 { 1.0 } else { cross }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_ordered_and_end_at_goal() {
        let p = SinePath::new(2.0, 10.0, 20.0, 0.05).unwrap();
        assert_eq!(p.len(), 401);
        assert_eq!(p.point(0), [0.0, 0.0]);
        assert!((p.goal[0] - 20.0).abs() < 1e-12 && p.goal[1].abs() < 1e-9);
        assert!(p.total_arclength() > 20.0);
    }

    #[test]
    fn nearest_distance_matches_brute_force() {
        let path = SinePath::new(3.0, 10.0, 20.0, 0.05).unwrap();
        for &(x, y) in &[(0.3, 2.9), (5.0, -1.0), (12.5, 4.0), (-1.0, 0.0), (25.0, 1.0), (7.5, -3.2)] {
            let brute = (0..path.len())
                .map(|i| (path.point(i)[0] - x).hypot(path.point(i)[1] - y))
                .fold(f64::INFINITY, f64::min);
            assert!((path.nearest_distance([x, y]) - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn lateral_error_sign() {
        let path = SinePath::new(0.0, 10.0, 20.0, 0.05).unwrap();
        let (_, left) = path.track([3.0, 0.2], 0, path.len());
        let (_, right) = path.track([3.0, -0.2], 0, path.len());
        assert!((left - 0.2).abs() < 1e-12);
        assert!((right + 0.2).abs() < 1e-12);
    }
}
