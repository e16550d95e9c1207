//! Grid falsification of the model dynamics.
//!
//! Every grid point is rolled out once per disturbance level and labelled:
//! an algorithmic failure if the zero-noise rollout fails, a disturbance
//! failure if every nonzero level fails, safe otherwise.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::Benchmark;
use crate::domain::{Bounds, DisturbanceBox, DisturbanceLevel, EnvPoint, RiskSample, RiskSpec, Source};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    FailF,
    NoiseFail,
    Safe,
}

impl Label {
    pub fn is_risk(self) -> bool {
        !matches!(self, Label::Safe)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::FailF => "fail_f",
            Label::NoiseFail => "noise_fail",
            Label::Safe => "safe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fail_f" => Ok(Label::FailF),
            "noise_fail" => Ok(Label::NoiseFail),
            "safe" => Ok(Label::Safe),
            other => Err(Error::InvalidInput(format!("unknown label {other:?}"))),
        }
    }
}

/// Full Cartesian lattice with `n_per_axis` points per axis, endpoints
/// included. The first axis varies slowest.
pub fn grid_samples(bounds: &Bounds, n_per_axis: usize) -> Result<Vec<EnvPoint>> {
    if n_per_axis < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 points per axis, got {n_per_axis}")));
    }
    let d = bounds.dim();
    let total = n_per_axis.pow(d as u32);
    let axis: Vec<Vec<f64>> = (0..d).map(|j| linspace(bounds.lower[j], bounds.upper[j], n_per_axis)).collect();
    let mut out = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut coords = vec![0.0; d];
        for j in (0..d).rev() {
            coords[j] = axis[j][rem % n_per_axis];
            rem /= n_per_axis;
        }
        out.push(EnvPoint(coords));
    }
    Ok(out)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| match i {
            0 => lo,
            _ if i == n - 1 => hi,
            _ => (a + (b - a) * i as f64 / (n - 1) as f64).exp(),
        })
        .collect()
}

/// Log-spaced lattice over the disturbance box with `(0, 0)` first.
pub fn disturbance_grid(b: &DisturbanceBox, levels_per_axis: usize) -> Result<Vec<DisturbanceLevel>> {
    let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
    if !ok(b.sigma1) || !ok(b.sigma2) {
        return Err(Error::InvalidInput(format!("disturbance box needs 0 < min <= max, got {b:?}")));
    }
    if levels_per_axis == 0 {
        return Err(Error::InvalidInput("levels_per_axis must be positive".into()));
    }
    let s1 = logspace(b.sigma1.0, b.sigma1.1, levels_per_axis);
    let s2 = logspace(b.sigma2.0, b.sigma2.1, levels_per_axis);
    let mut out = vec![DisturbanceLevel::ZERO];
    for &a in &s1 {
        for &c in &s2 {
            out.push(DisturbanceLevel { sigma1: a, sigma2: c });
        }
    }
    Ok(out)
}

/// Label of one grid point from its row of risks.
pub fn derive_label(row: &[f64], levels: &[DisturbanceLevel], spec: &RiskSpec) -> Result<Label> {
    let mut zero_fails = None;
    let mut all_noisy_fail = true;
    let mut any_noisy = false;
    for (r, d) in row.iter().zip(levels) {
        let fails = spec.is_failure(*r)?;
        if d.is_zero() {
            zero_fails = Some(fails);
        } else {
            any_noisy = true;
            all_noisy_fail &= fails;
        }
    }
    let zero_fails = zero_fails.ok_or_else(|| Error::InvalidInput("levels lack the (0, 0) entry".into()))?;
    Ok(if zero_fails {
        Label::FailF
    } else if any_noisy && all_noisy_fail {
        Label::NoiseFail
    } else {
        Label::Safe
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalsificationDataset {
    pub grid: Vec<EnvPoint>,
    pub levels: Vec<DisturbanceLevel>,
    /// `risk_table[i][j]`: raw risk of grid point `i` at level `j`.
    pub risk_table: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub spec: RiskSpec,
}

impl FalsificationDataset {
    pub fn from_table(
        grid: Vec<EnvPoint>,
        levels: Vec<DisturbanceLevel>,
        risk_table: Vec<Vec<f64>>,
        spec: RiskSpec,
    ) -> Result<Self> {
        if levels.iter().filter(|d| d.is_zero()).count() != 1 {
            return Err(Error::InvalidInput("levels must contain exactly one (0, 0) entry".into()));
        }
        if risk_table.len() != grid.len() || risk_table.iter().any(|r| r.len() != levels.len()) {
            return Err(Error::InvalidInput("risk table shape does not match grid x levels".into()));
        }
        let labels = risk_table.iter().map(|row| derive_label(row, &levels, &spec)).collect::<Result<_>>()?;
        Ok(Self { grid, levels, risk_table, labels, spec })
    }

    /// Same risks, labels recomputed for another threshold.
    pub fn relabel(&self, spec: RiskSpec) -> Result<Self> {
        Self::from_table(self.grid.clone(), self.levels.clone(), self.risk_table.clone(), spec)
    }

    pub fn zero_level(&self) -> usize {
        self.levels.iter().position(|d| d.is_zero()).expect("validated on construction")
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Grid indices labelled `FailF` or `NoiseFail`.
    pub fn risk_indices(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&i| self.labels[i].is_risk()).collect()
    }

    /// Risk value entering the model dataset for a `Z_risk` point: the
    /// zero-noise risk for algorithmic failures, the smallest nonzero-level
    /// risk for disturbance failures.
    pub fn representative_risk(&self, i: usize) -> Option<f64> {
        let row = &self.risk_table[i];
        match self.labels[i] {
            Label::FailF => Some(row[self.zero_level()]),
            Label::NoiseFail => {
                row.iter().zip(&self.levels).filter(|(_, d)| !d.is_zero()).map(|(r, _)| *r).reduce(f64::min)
            }
            Label::Safe => None,
        }
    }

    /// CSV with one row per (grid point, level).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let d = self.grid.first().map_or(0, EnvPoint::dim);
        let zcols: Vec<String> = (1..=d).map(|j| format!("z{j}")).collect();
        writeln!(w, "{},level,sigma1,sigma2,risk,label", zcols.join(","))?;
        for (i, z) in self.grid.iter().enumerate() {
            let zs: Vec<String> = z.coords().iter().map(|x| x.to_string()).collect();
            for (j, lvl) in self.levels.iter().enumerate() {
                writeln!(
                    w,
                    "{},{j},{},{},{},{}",
                    zs.join(","),
                    lvl.sigma1,
                    lvl.sigma2,
                    self.risk_table[i][j],
                    self.labels[i].as_str()
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`write_csv`](Self::write_csv); labels are
    /// re-derived from the risks and checked against the stored ones.
    pub fn read_csv(path: &Path, spec: RiskSpec) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let d = headers.iter().filter(|h| h.starts_with('z')).count();
        let mut grid: Vec<EnvPoint> = Vec::new();
        let mut levels: Vec<DisturbanceLevel> = Vec::new();
        let mut table: Vec<Vec<f64>> = Vec::new();
        let mut stored: Vec<Label> = Vec::new();
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::InvalidInput(format!("bad number {s:?} in {}: {e}", path.display())))
        };
        for rec in rdr.records() {
            let rec = rec?;
            let z: Vec<f64> = (0..d).map(|j| num(&rec[j])).collect::<Result<_>>()?;
            let j: usize = rec[d]
                .parse()
                .map_err(|e| Error::InvalidInput(format!("bad level index in {}: {e}", path.display())))?;
            let lvl = DisturbanceLevel { sigma1: num(&rec[d + 1])?, sigma2: num(&rec[d + 2])? };
            let risk = num(&rec[d + 3])?;
            if j == 0 {
                grid.push(EnvPoint(z));
                table.push(Vec::new());
                stored.push(Label::parse(&rec[d + 4])?);
            }
            if grid.len() == 1 {
                levels.push(lvl);
            }
            table.last_mut().ok_or_else(|| Error::InvalidInput("table does not start at level 0".into()))?.push(risk);
        }
        let fd = Self::from_table(grid, levels, table, spec)?;
        if fd.labels != stored {
            return Err(Error::InvalidInput(format!("stored labels in {} disagree with risks", path.display())));
        }
        Ok(fd)
    }
}

/// One seeded model rollout per (grid point, level). Risks that are not
/// finite are stored as `f64::MAX`, so a blow-up counts as a failure.
pub fn label_grid(
    bench: &dyn Benchmark,
    grid: &[EnvPoint],
    levels: &[DisturbanceLevel],
    spec: RiskSpec,
    run_seed: u64,
) -> Result<FalsificationDataset> {
    let n_levels = levels.len() as u64;
    let table: Vec<Vec<f64>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            levels
                .iter()
                .enumerate()
                .map(|(j, d)| {
                    let seed = derive_seed(run_seed, stage::FALSIFY, i as u64 * n_levels + j as u64);
                    let roll = bench.simulate_model(z, *d, seed);
                    let r = bench.risk(z, &roll);
                    if r.is_finite() {
                        r
                    } else {
                        f64::MAX
                    }
                })
                .collect()
        })
        .collect();
    FalsificationDataset::from_table(grid.to_vec(), levels.to_vec(), table, spec)
}

/// Draws `m` distinct `Z_risk` points as the model dataset `D2`, in grid
/// order.
pub fn extract_model_dataset(fd: &FalsificationDataset, m: usize, run_seed: u64) -> Result<Vec<RiskSample>> {
    let pool = fd.risk_indices();
    if m > pool.len() {
        return Err(Error::NotEnoughPoints { needed: m, available: pool.len() });
    }
    let mut rng = seeded_rng(run_seed, stage::MODEL_DATASET, 0);
    let mut picked: Vec<usize> = sample(&mut rng, pool.len(), m).into_iter().map(|k| pool[k]).collect();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let r = fd.representative_risk(i).expect("risk index has a representative risk");
            RiskSample::new(fd.grid[i].clone(), r, Source::Model)
        })
        .collect()
}

/// Metadata written next to the falsification CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FalsifyManifest {
    pub bounds: Bounds,
    pub grid_per_axis: usize,
    pub disturbance_box: DisturbanceBox,
    pub levels: Vec<DisturbanceLevel>,
    pub run_seed: u64,
    pub risk: RiskSpec,
    pub counts: LabelCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub fail_f: usize,
    pub noise_fail: usize,
    pub safe: usize,
}

impl LabelCounts {
    pub fn of(fd: &FalsificationDataset) -> Self {
        Self { fail_f: fd.count(Label::FailF), noise_fail: fd.count(Label::NoiseFail), safe: fd.count(Label::Safe) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{SyntheticBenchmark, SyntheticSpec};
    use proptest::prelude::*;

    #[test]
    fn lattice_sizes_and_corners() {
        let b = Bounds::new(vec![0.5, 0.5], vec![4.5, 6.5]).unwrap();
        let g = grid_samples(&b, 30).unwrap();
        assert_eq!(g.len(), 900);
        for c in [[0.5, 0.5], [0.5, 6.5], [4.5, 0.5], [4.5, 6.5]] {
            assert!(g.iter().any(|p| p.coords() == c));
        }
        assert_eq!(grid_samples(&Bounds::cube(100.0, 500.0, 2).unwrap(), 30).unwrap().len(), 900);
        let line = grid_samples(&Bounds::cube(0.0, 1.0, 1).unwrap(), 2).unwrap();
        assert_eq!(line, vec![EnvPoint(vec![0.0]), EnvPoint(vec![1.0])]);
        assert!(grid_samples(&b, 1).is_err());
    }

    #[test]
    fn disturbance_levels() {
        let b = DisturbanceBox { sigma1: (1e-4, 1.0), sigma2: (1e-5, 1e-3) };
        let lv = disturbance_grid(&b, 5).unwrap();
        assert_eq!(lv.len(), 26);
        assert!(lv[0].is_zero());
        assert_eq!(lv.iter().filter(|d| d.is_zero()).count(), 1);
        assert!(lv.contains(&DisturbanceLevel { sigma1: 1e-4, sigma2: 1e-5 }));
        assert!(lv.contains(&DisturbanceLevel { sigma1: 1.0, sigma2: 1e-3 }));
        assert!(lv.iter().all(|d| b.contains(d)));
        // log spacing: the middle level is the geometric mean
        assert!(lv.iter().any(|d| (d.sigma1 - 1e-2).abs() < 1e-15));

        let p = DisturbanceBox { sigma1: (2e-5, 2e-2), sigma2: (7e-6, 7e-3) };
        let lv = disturbance_grid(&p, 3).unwrap();
        assert!(lv.contains(&DisturbanceLevel { sigma1: 2e-5, sigma2: 7e-6 }));
        assert!(lv.contains(&DisturbanceLevel { sigma1: 2e-2, sigma2: 7e-3 }));
        assert!(disturbance_grid(&DisturbanceBox { sigma1: (0.0, 1.0), sigma2: (1e-5, 1e-3) }, 3).is_err());
    }

    fn levels3() -> Vec<DisturbanceLevel> {
        vec![
            DisturbanceLevel::ZERO,
            DisturbanceLevel { sigma1: 0.1, sigma2: 0.1 },
            DisturbanceLevel { sigma1: 1.0, sigma2: 1.0 },
        ]
    }

    #[test]
    fn label_precedence() {
        let spec = RiskSpec::raw(0.3);
        let lv = levels3();
        assert_eq!(derive_label(&[0.5, 0.0, 0.0], &lv, &spec).unwrap(), Label::FailF);
        assert_eq!(derive_label(&[0.1, 0.4, 0.9], &lv, &spec).unwrap(), Label::NoiseFail);
        assert_eq!(derive_label(&[0.1, 0.4, 0.3], &lv, &spec).unwrap(), Label::Safe);
        assert_eq!(derive_label(&[0.3, 0.4, 0.4], &lv, &spec).unwrap(), Label::NoiseFail);
    }

    #[test]
    fn model_dataset_draws_from_risk_region() {
        let spec = RiskSpec::raw(0.3);
        let grid: Vec<EnvPoint> = (0..6).map(|i| EnvPoint(vec![i as f64, 0.0])).collect();
        let table = vec![
            vec![0.5, 0.1, 0.1],
            vec![0.1, 0.4, 0.9],
            vec![0.1, 0.1, 0.1],
            vec![0.7, 0.2, 0.8],
            vec![0.0, 0.35, 0.6],
            vec![0.2, 0.5, 0.1],
        ];
        let fd = FalsificationDataset::from_table(grid, levels3(), table, spec).unwrap();
        assert_eq!(fd.risk_indices(), vec![0, 1, 3, 4]);
        let all = extract_model_dataset(&fd, 4, 9).unwrap();
        let xs: Vec<f64> = all.iter().map(|s| s.z.coords()[0]).collect();
        assert_eq!(xs, vec![0.0, 1.0, 3.0, 4.0]);
        let risks: Vec<f64> = all.iter().map(|s| s.risk).collect();
        assert_eq!(risks, vec![0.5, 0.4, 0.7, 0.35]);
        assert!(all.iter().all(|s| s.risk > 0.3 && s.source == Source::Model));
        assert!(matches!(extract_model_dataset(&fd, 5, 9), Err(Error::NotEnoughPoints { needed: 5, available: 4 })));
        assert_eq!(extract_model_dataset(&fd, 2, 3).unwrap(), extract_model_dataset(&fd, 2, 3).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let bench = SyntheticBenchmark::new(SyntheticSpec::default(), Bounds::cube(100.0, 500.0, 2).unwrap()).unwrap();
        let grid = grid_samples(bench.bounds(), 4).unwrap();
        let lv = disturbance_grid(&DisturbanceBox { sigma1: (2e-5, 2e-2), sigma2: (7e-6, 7e-3) }, 2).unwrap();
        let fd = label_grid(&bench, &grid, &lv, RiskSpec::raw(0.3), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        fd.write_csv(&p).unwrap();
        assert_eq!(FalsificationDataset::read_csv(&p, RiskSpec::raw(0.3)).unwrap(), fd);
    }

    #[test]
    fn grid_labelling_is_deterministic() {
        let bench = SyntheticBenchmark::new(SyntheticSpec::default(), Bounds::cube(100.0, 500.0, 2).unwrap()).unwrap();
        let grid = grid_samples(bench.bounds(), 6).unwrap();
        let lv = disturbance_grid(&DisturbanceBox { sigma1: (2e-5, 2e-2), sigma2: (7e-6, 7e-3) }, 3).unwrap();
        let a = label_grid(&bench, &grid, &lv, RiskSpec::raw(0.3), 11).unwrap();
        let b = label_grid(&bench, &grid, &lv, RiskSpec::raw(0.3), 11).unwrap();
        assert_eq!(a.risk_table, b.risk_table);
        let c = label_grid(&bench, &grid, &lv, RiskSpec::raw(0.3), 12).unwrap();
        assert_ne!(a.risk_table, c.risk_table);
    }

    proptest! {
        #[test]
        fn labels_partition_and_rethreshold_monotone(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..40),
            t1 in 0.0f64..1.0,
            dt in 0.0f64..0.5,
        ) {
            let grid: Vec<EnvPoint> = (0..rows.len()).map(|i| EnvPoint(vec![i as f64])).collect();
            let lo = FalsificationDataset::from_table(grid, levels3(), rows, RiskSpec::raw(t1)).unwrap();
            prop_assert_eq!(lo.count(Label::FailF) + lo.count(Label::NoiseFail) + lo.count(Label::Safe), lo.grid.len());
            let hi = lo.relabel(RiskSpec::raw(t1 + dt)).unwrap();
            for i in 0..lo.grid.len() {
                if hi.labels[i] == Label::FailF {
                    prop_assert_eq!(lo.labels[i], Label::FailF);
                }
            }
        }
    }
}
