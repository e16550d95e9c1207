//! Path tracking with an LQR speed+steering controller.
//!
//! The model dynamics is the kinematic bicycle the controller was designed
//! on. The "true" plant is a dynamic bicycle with linear tires and a
//! first-order steering actuator, driven by the same controller.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::lqr::{lqr_gain, LqrWeights, Mat2x5, RiccatiOptions};
use super::path::SinePath;
use super::Benchmark;
use crate::coverage::range_coverage;
use crate::domain::{Bounds, DisturbanceLevel, EnvPoint, Rollout, Source};
use crate::error::{Error, Result};

/// Risk assigned to rollouts that blew up numerically.
pub const DIVERGED_RISK: f64 = f64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BicycleParams {
    /// m
    pub wheelbase: f64,
    /// s
    pub dt: f64,
    /// Step cap as a multiple of the nominal traversal time `arclength / v_ref`.
    pub horizon_factor: f64,
    /// rad
    pub steer_limit: f64,
    /// m/s^2
    pub accel_limit: f64,
    pub path_wavelength: f64,
    pub path_length: f64,
    pub path_spacing: f64,
    /// Samples searched ahead of the last tracked index.
    pub track_window: usize,
    /// Abort a rollout once the vehicle is this far from the path (m).
    pub abort_deviation: f64,
    pub lqr: LqrWeights,
    /// N/rad
    pub cornering_stiffness_front: f64,
    /// N/rad
    pub cornering_stiffness_rear: f64,
    /// kg
    pub mass: f64,
    /// kg m^2
    pub yaw_inertia: f64,
    /// Fraction of the wheelbase between the front axle and the center of mass.
    pub cg_to_front_fraction: f64,
    /// Steering actuator time constant (s).
    pub actuator_lag: f64,
    /// Minimum integration substeps per control step for the dynamic plant;
    /// more are taken when the lateral modes are stiff (low forward speed).
    pub substeps: usize,
    /// Intrinsic disturbance of the true plant.
    pub true_noise: DisturbanceLevel,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            wheelbase: 1.2,
            dt: 0.1,
            horizon_factor: 2.0,
            steer_limit: 0.8,
            accel_limit: 2.0,
            path_wavelength: 10.0,
            path_length: 20.0,
            path_spacing: 0.02,
            track_window: 200,
            abort_deviation: 5.0,
            lqr: LqrWeights::default(),
            cornering_stiffness_front: 100.0,
            cornering_stiffness_rear: 100.0,
            mass: 3.5,
            yaw_inertia: 1.2,
            cg_to_front_fraction: 0.5,
            actuator_lag: 0.1,
            substeps: 10,
            true_noise: DisturbanceLevel::ZERO,
        }
    }
}

impl BicycleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("wheelbase", self.wheelbase),
            ("dt", self.dt),
            ("horizon_factor", self.horizon_factor),
            ("steer_limit", self.steer_limit),
            ("accel_limit", self.accel_limit),
            ("path_wavelength", self.path_wavelength),
            ("path_length", self.path_length),
            ("path_spacing", self.path_spacing),
            ("abort_deviation", self.abort_deviation),
            ("cornering_stiffness_front", self.cornering_stiffness_front),
            ("cornering_stiffness_rear", self.cornering_stiffness_rear),
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("actuator_lag", self.actuator_lag),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("bicycle.{name} must be positive, got {v}")));
            }
        }
        if !(self.cg_to_front_fraction > 0.0 && self.cg_to_front_fraction < 1.0) {
            return Err(Error::Config("bicycle.cg_to_front_fraction must lie in (0, 1)".into()));
        }
        if self.substeps == 0 || self.track_window == 0 {
            return Err(Error::Config("bicycle.substeps and track_window must be positive".into()));
        }
        Ok(())
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = a % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a < -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

/// Plant-specific state handling.
trait Plant {
    fn initial(&self, path: &SinePath, v0: f64) -> Vec<f64>;
    /// `[x, y, yaw, speed]` as seen by the controller, before noise.
    fn output(&self, state: &[f64]) -> [f64; 4];
    fn step(&self, state: &mut [f64], steer: f64, accel: f64);
}

struct Kinematic<'a>(&'a BicycleParams);

impl Plant for Kinematic<'_> {
    fn initial(&self, path: &SinePath, v0: f64) -> Vec<f64> {
        let p = path.point(0);
        vec![p[0], p[1], path.yaw(0), v0]
    }

    fn output(&self, s: &[f64]) -> [f64; 4] {
        [s[0], s[1], s[2], s[3]]
    }

    fn step(&self, s: &mut [f64], steer: f64, accel: f64) {
        let dt = self.0.dt;
        let (x, y, yaw, v) = (s[0], s[1], s[2], s[3]);
        s[0] = x + v * yaw.cos() * dt;
        s[1] = y + v * yaw.sin() * dt;
        s[2] = yaw + v / self.0.wheelbase * steer.tan() * dt;
        s[3] = v + accel * dt;
    }
}

/// State `[x, y, yaw, vx, vy, yaw_rate, steer_actual]`. Velocities are body
/// frame at the center of mass; `(x, y)` is the rear axle, the point the
/// controller tracks.
struct Dynamic<'a>(&'a BicycleParams);

impl Dynamic<'_> {
    fn derivative(&self, s: &[f64; 7], steer_cmd: f64, accel: f64) -> [f64; 7] {
        let p = self.0;
        let lf = p.cg_to_front_fraction * p.wheelbase;
        let lr = p.wheelbase - lf;
        let [_, _, yaw, vx, vy, r, delta] = *s;
        let vx_eff = vx.max(0.1);
        let alpha_f = delta - (vy + lf * r).atan2(vx_eff);
        let alpha_r = -(vy - lr * r).atan2(vx_eff);
        let fyf = p.cornering_stiffness_front * alpha_f;
        let fyr = p.cornering_stiffness_rear * alpha_r;
        [
            vx * yaw.cos() - (vy - lr * r) * yaw.sin(),
            vx * yaw.sin() + (vy - lr * r) * yaw.cos(),
            r,
            accel + r * vy - fyf * delta.sin() / p.mass,
            -r * vx + (fyf * delta.cos() + fyr) / p.mass,
            (lf * fyf * delta.cos() - lr * fyr) / p.yaw_inertia,
            (steer_cmd - delta) / p.actuator_lag,
        ]
    }
}

impl Plant for Dynamic<'_> {
    fn initial(&self, path: &SinePath, v0: f64) -> Vec<f64> {
        let p = path.point(0);
        vec![p[0], p[1], path.yaw(0), v0, 0.0, 0.0, 0.0]
    }

    fn output(&self, s: &[f64]) -> [f64; 4] {
        let lr = (1.0 - self.0.cg_to_front_fraction) * self.0.wheelbase;
        [s[0], s[1], s[2], s[3].hypot(s[4] - lr * s[5])]
    }

    fn step(&self, s: &mut [f64], steer: f64, accel: f64) {
        let p = self.0;
        let lf = p.cg_to_front_fraction * p.wheelbase;
        let lr = p.wheelbase - lf;
        let vx = s[3].max(0.1);
        let stiffest = ((p.cornering_stiffness_front + p.cornering_stiffness_rear) / (p.mass * vx))
            .max((p.cornering_stiffness_front * lf * lf + p.cornering_stiffness_rear * lr * lr) / (p.yaw_inertia * vx))
            .max(1.0 / p.actuator_lag);
        // Keep h * lambda well inside the RK4 stability region.
        let substeps = p.substeps.max((p.dt * stiffest).ceil() as usize);
        let h = p.dt / substeps as f64;
        let mut x: [f64; 7] = s.try_into().expect("dynamic state has 7 entries");
        let add = |a: &[f64; 7], b: &[f64; 7], k: f64| -> [f64; 7] { std::array::from_fn(|i| a[i] + k * b[i]) };
        for _ in 0..substeps {
            let k1 = self.derivative(&x, steer, accel);
            let k2 = self.derivative(&add(&x, &k1, h / 2.0), steer, accel);
            let k3 = self.derivative(&add(&x, &k2, h / 2.0), steer, accel);
            let k4 = self.derivative(&add(&x, &k3, h), steer, accel);
            x = std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        }
        s.copy_from_slice(&x);
    }
}

/// Bicycle path-tracking benchmark with `z = [w, v_ref]`.
#[derive(Clone, Debug)]
pub struct BicycleBenchmark {
    pub params: BicycleParams,
    bounds: Bounds,
}

impl BicycleBenchmark {
    pub fn new(params: BicycleParams, bounds: Bounds) -> Result<Self> {
        params.validate()?;
        if bounds.dim() != 2 {
            return Err(Error::Config(format!("bicycle benchmark needs d = 2, got {}", bounds.dim())));
        }
        if bounds.lower[1] <= 0.0 {
            return Err(Error::Config("bicycle reference speeds must be positive".into()));
        }
        Ok(Self { params, bounds })
    }

    pub fn path(&self, width: f64) -> Result<SinePath> {
        SinePath::new(width, self.params.path_wavelength, self.params.path_length, self.params.path_spacing)
    }

    pub fn gain(&self, v_ref: f64) -> Result<Mat2x5> {
        let p = &self.params;
        Ok(lqr_gain(v_ref, p.wheelbase, p.dt, &p.lqr, RiccatiOptions::default())?.gain)
    }

    fn run<P: Plant>(&self, plant: &P, z: &EnvPoint, noise: DisturbanceLevel, seed: u64, source: Source) -> Rollout {
        let p = &self.params;
        let (width, v_ref) = (z.coords()[0], z.coords()[1]);
        let mut rollout = Rollout::new(Vec::new(), noise, seed, source);
        let (path, gain) = match (self.path(width), self.gain(v_ref)) {
            (Ok(path), Ok(gain)) => (path, gain),
            _ => {
                rollout.diverged = true;
                return rollout;
            }
        };
        let mut state = plant.initial(&path, v_ref);
        rollout.states[0] = state.clone();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dyn_std = noise.sigma1.sqrt();
        let out_std = noise.sigma2.sqrt();
        let max_steps = (p.horizon_factor * path.total_arclength() / (v_ref * p.dt)).ceil() as usize;
        let last = path.len() - 1;
        let end_tangent = [path.yaw(last).cos(), path.yaw(last).sin()];

        let mut idx = 0;
        let mut prev_e = 0.0;
        let mut prev_th_e = 0.0;
        for _ in 0..max_steps {
            let mut y = plant.output(&state);
            if out_std > 0.0 {
                for v in &mut y {
                    *v += out_std * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                }
            }
            let (i, e) = path.track([y[0], y[1]], idx, p.track_window);
            idx = i;
            let th_e = wrap_angle(y[2] - path.yaw(idx));
            let err = nalgebra::Vector5::new(e, (e - prev_e) / p.dt, th_e, (th_e - prev_th_e) / p.dt, y[3] - v_ref);
            prev_e = e;
            prev_th_e = th_e;
            let u = -gain * err;
            let feedforward = (p.wheelbase * path.curvature(idx)).atan();
            let steer = (feedforward + wrap_angle(u[0])).clamp(-p.steer_limit, p.steer_limit);
            let accel = u[1].clamp(-p.accel_limit, p.accel_limit);

            plant.step(&mut state, steer, accel);
            if dyn_std > 0.0 {
                for v in &mut state {
                    *v += dyn_std * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                }
            }
            if state.iter().any(|v| !v.is_finite()) || state[0].abs() > 1e6 || state[1].abs() > 1e6 {
                rollout.diverged = true;
                break;
            }
            rollout.push(vec![steer, accel], state.clone(), &[("steer", steer)]);

            let pos = [state[0], state[1]];
            if path.nearest_distance(pos) > p.abort_deviation {
                break;
            }
            let past_goal = (pos[0] - path.goal[0]) * end_tangent[0] + (pos[1] - path.goal[1]) * end_tangent[1];
            if idx + 1 >= last && past_goal >= 0.0 {
                break;
            }
        }
        rollout
    }

    pub fn simulate_model(&self, z: &EnvPoint, d: DisturbanceLevel, seed: u64) -> Rollout {
        self.run(&Kinematic(&self.params), z, d, seed, Source::Model)
    }

    pub fn simulate_true(&self, z: &EnvPoint, seed: u64) -> Rollout {
        self.run(&Dynamic(&self.params), z, self.params.true_noise, seed, Source::True)
    }
}

/// Risk components of a tracking rollout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingRisk {
    pub mean: f64,
    pub max: f64,
    pub final_distance: f64,
}

impl TrackingRisk {
    /// `20 R_mean + R_max + 10 R_final`.
    pub fn total(&self) -> f64 {
        20.0 * self.mean + self.max + 10.0 * self.final_distance
    }
}

/// Tracking risk of a rollout against `path`; `None` for a diverged or
/// empty rollout. `mean`/`max` use the distance of every state to the
/// nearest path sample; `final_distance` is the closest approach to the goal
/// along the piecewise-linear trajectory.
pub fn tracking_risk(rollout: &Rollout, path: &SinePath) -> Option<TrackingRisk> {
    if rollout.diverged || rollout.states.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut final_distance = f64::INFINITY;
    let mut prev: Option<[f64; 2]> = None;
    for s in &rollout.states {
        let p = [s[0], s[1]];
        let d = path.nearest_distance(p);
        sum += d;
        max = max.max(d);
        // Closest approach to the goal along the segment travelled in this step.
        let goal_distance = match prev {
            Some(q) => segment_distance(path.goal, q, p),
            None => (p[0] - path.goal[0]).hypot(p[1] - path.goal[1]),
        };
        final_distance = final_distance.min(goal_distance);
        prev = Some(p);
    }
    Some(TrackingRisk { mean: sum / rollout.states.len() as f64, max, final_distance })
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (a[0] + t * ab[0] - p[0]).hypot(a[1] + t * ab[1] - p[1])
}

impl Benchmark for BicycleBenchmark {
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn simulate_model(&self, z: &EnvPoint, d: DisturbanceLevel, seed: u64) -> Rollout {
        BicycleBenchmark::simulate_model(self, z, d, seed)
    }

    fn simulate_true(&self, z: &EnvPoint, seed: u64) -> Rollout {
        BicycleBenchmark::simulate_true(self, z, seed)
    }

    fn risk(&self, z: &EnvPoint, rollout: &Rollout) -> f64 {
        self.path(z.coords()[0])
            .ok()
            .and_then(|path| tracking_risk(rollout, &path))
            .map_or(DIVERGED_RISK, |r| r.total())
    }

    fn coverage(&self, _z: &EnvPoint, rollout: &Rollout) -> f64 {
        rollout.channel("steer").and_then(|s| range_coverage(s).ok()).unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bench(lo_w: f64) -> BicycleBenchmark {
        BicycleBenchmark::new(BicycleParams::default(), Bounds::new(vec![lo_w, 0.5], vec![4.5, 6.5]).unwrap()).unwrap()
    }

    #[test]
    fn zero_noise_rollouts_are_deterministic() {
        let b = bench(0.5);
        let z = EnvPoint(vec![2.0, 3.0]);
        assert_eq!(b.simulate_model(&z, DisturbanceLevel::ZERO, 1), b.simulate_model(&z, DisturbanceLevel::ZERO, 1));
        assert_eq!(b.simulate_true(&z, 9), b.simulate_true(&z, 9));
    }

    #[test]
    fn straight_path_is_tracked() {
        let b = bench(0.0);
        let z = EnvPoint(vec![0.0, 3.0]);
        let roll = b.simulate_model(&z, DisturbanceLevel::ZERO, 0);
        let r = tracking_risk(&roll, &b.path(0.0).unwrap()).unwrap();
        assert!(r.mean < 0.05, "{r:?}");
    }

    #[test]
    fn inputs_respect_limits_even_under_noise() {
        let b = bench(0.5);
        let d = DisturbanceLevel::new(0.01, 1e-3).unwrap();
        for (w, v) in [(4.5, 6.5), (3.0, 4.0), (0.5, 0.5)] {
            let roll = b.simulate_model(&EnvPoint(vec![w, v]), d, 3);
            assert!(roll.is_consistent());
            for u in &roll.inputs {
                assert!(u[0].abs() <= 0.8 && u[1].abs() <= 2.0);
            }
        }
    }

    #[test]
    fn model_and_true_agree_at_low_speed() {
        let b = bench(0.5);
        let z = EnvPoint(vec![0.5, 0.5]);
        let rm = b.risk(&z, &b.simulate_model(&z, DisturbanceLevel::ZERO, 0));
        let rt = b.risk(&z, &b.simulate_true(&z, 0));
        assert!((rm - rt).abs() < 0.2, "model {rm}, true {rt}");
    }

    #[test]
    fn offset_trajectory_risk() {
        let path = SinePath::new(0.0, 10.0, 20.0, 0.05).unwrap().with_goal([20.0, 0.1]);
        let mut roll = Rollout::new(vec![0.0, 0.1], DisturbanceLevel::ZERO, 0, Source::Model);
        for i in 1..=200 {
            roll.push(vec![0.0, 0.0], vec![0.1 * i as f64, 0.1], &[]);
        }
        let r = tracking_risk(&roll, &path).unwrap();
        assert!((r.total() - 2.1).abs() < 1e-9, "{r:?}");

        let path2 = SinePath::new(0.0, 10.0, 20.0, 0.05).unwrap().with_goal([20.0, 0.2]);
        let mut roll2 = Rollout::new(vec![0.0, 0.2], DisturbanceLevel::ZERO, 0, Source::Model);
        for i in 1..=200 {
            roll2.push(vec![0.0, 0.0], vec![0.1 * i as f64, 0.2], &[]);
        }
        let r2 = tracking_risk(&roll2, &path2).unwrap();
        assert!((r2.mean - 2.0 * r.mean).abs() < 1e-12 && (r2.max - 2.0 * r.max).abs() < 1e-12);
    }

    #[test]
    fn on_path_rollout_has_zero_risk() {
        let path = SinePath::new(1.0, 10.0, 20.0, 0.05).unwrap();
        let mut roll = Rollout::new(path.point(0).to_vec(), DisturbanceLevel::ZERO, 0, Source::Model);
        for i in 1..path.len() {
            roll.push(vec![0.0, 0.0], path.point(i).to_vec(), &[]);
        }
        assert!(tracking_risk(&roll, &path).unwrap().total() < 1e-12);
    }
}
