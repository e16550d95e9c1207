//! Lloyd's k-means with k-means++ seeding and best-of-restarts selection.

use rand::Rng as _;

use crate::domain::sq_dist;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iterations: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { restarts: 50, max_iterations: 300 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: each new center is drawn with probability
/// proportional to the squared distance to the closest existing one.
fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // Guard against round-off landing on a zero-weight tail.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[idx].clone();
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iterations: usize) -> Clustering {
    let n = points.len();
    let k = centroids.len();
    let d = points[0].len();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..max_iterations {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, dd) = nearest(p, &centroids);
            dists[i] = dd;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Empty cluster: move it to the worst-served point.
                let far = (0..n).fold(0, |b, i| if dists[i] > dists[b] { i } else { b });
                centroids[c] = points[far].clone();
                dists[far] = 0.0;
            }
        }
    }
    let inertia = points.iter().zip(&assignment).map(|(p, &c)| sq_dist(p, &centroids[c])).sum();
    Clustering { centroids, assignment, inertia }
}

/// Best-inertia clustering of `points` into `k` groups over `restarts`
/// seeded runs.
pub fn kmeans(points: &[Vec<f64>], k: usize, cfg: KMeansConfig, rng: &mut Rng) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::NotEnoughPoints { needed: k, available: points.len() });
    }
    if k == points.len() {
        return Ok(Clustering { centroids: points.to_vec(), assignment: (0..k).collect(), inertia: 0.0 });
    }
    let mut best: Option<Clustering> = None;
    for _ in 0..cfg.restarts.max(1) {
        let c = lloyd(points, plus_plus(points, k, rng), cfg.max_iterations.max(1));
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// For each centroid in order, the index of the closest point not already
/// taken by an earlier centroid (ties go to the lower index).
pub fn nearest_distinct(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Result<Vec<usize>> {
    if centroids.len() > points.len() {
        return Err(Error::NotEnoughPoints { needed: centroids.len(), available: points.len() });
    }
    let mut taken = vec![false; points.len()];
    let mut out = Vec::with_capacity(centroids.len());
    for c in centroids {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = sq_dist(p, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        taken[best.0] = true;
        out.push(best.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn inertia_of(points: &[Vec<f64>], mask: u32) -> f64 {
        let mut total = 0.0;
        for side in [0, 1] {
            let members: Vec<&Vec<f64>> =
                points.iter().enumerate().filter(|(i, _)| (mask >> i) & 1 == side).map(|(_, p)| p).collect();
            if members.is_empty() {
                return f64::INFINITY;
            }
            let mean: Vec<f64> =
                (0..2).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
            total += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
        }
        total
    }

    #[test]
    fn two_blobs_match_best_bipartition() {
        let points: Vec<Vec<f64>> = vec![
            vec![0.0, 0.1],
            vec![0.2, -0.1],
            vec![-0.1, 0.0],
            vec![0.1, 0.2],
            vec![0.0, -0.2],
            vec![9.0, 9.1],
            vec![9.2, 8.9],
            vec![8.9, 9.0],
            vec![9.1, 9.2],
            vec![9.0, 8.8],
        ];
        let brute = (1..(1u32 << 10) - 1).map(|m| inertia_of(&points, m)).fold(f64::INFINITY, f64::min);
        let c = kmeans(&points, 2, KMeansConfig::default(), &mut seeded_rng(0, 0, 0)).unwrap();
        assert!((c.inertia - brute).abs() < 1e-12);
        let reps = nearest_distinct(&points, &c.centroids).unwrap();
        let blob = |i: usize| i / 5;
        assert_ne!(blob(reps[0]), blob(reps[1]));
    }

    #[test]
    fn k_equal_n_keeps_every_point() {
        let points: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let c = kmeans(&points, 7, KMeansConfig::default(), &mut seeded_rng(1, 0, 0)).unwrap();
        let mut reps = nearest_distinct(&points, &c.centroids).unwrap();
        reps.sort_unstable();
        assert_eq!(reps, (0..7).collect::<Vec<_>>());
        assert!(kmeans(&points, 8, KMeansConfig::default(), &mut seeded_rng(1, 0, 0)).is_err());
    }

    #[test]
    fn duplicates_and_determinism() {
        let mut points: Vec<Vec<f64>> = vec![vec![1.0, 1.0]; 6];
        points.push(vec![5.0, 5.0]);
        let c = kmeans(&points, 3, KMeansConfig::default(), &mut seeded_rng(2, 0, 0)).unwrap();
        assert!(c.inertia.abs() < 1e-12);
        assert!(c.centroids.iter().all(|x| x.iter().all(|v| v.is_finite())));
        let reps = nearest_distinct(&points, &c.centroids).unwrap();
        assert_eq!(reps.len(), 3);

        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()]).collect();
        let a = kmeans(&pts, 5, KMeansConfig::default(), &mut seeded_rng(3, 0, 0)).unwrap();
        let b = kmeans(&pts, 5, KMeansConfig::default(), &mut seeded_rng(3, 0, 0)).unwrap();
        assert_eq!(a, b);
    }
}
