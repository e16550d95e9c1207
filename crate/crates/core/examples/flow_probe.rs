//! Trains the flow classifier on a falsification grid and reports accuracy.
//!
//! `cargo run --release --example flow_probe -- [synthetic|bicycle] [epochs]`

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use simgap::bench::{Benchmark, BicycleBenchmark, BicycleParams, SyntheticBenchmark, SyntheticSpec};
use simgap::falsify::{disturbance_grid, grid_samples, label_grid};
use simgap::flow::{train_flow, Class, FlowConfig, TrainingSet};
use simgap::rng::seeded_rng;
use simgap::{Bounds, DisturbanceBox, RiskSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map_or("synthetic", String::as_str);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let (bench, spec, dbox): (Box<dyn Benchmark>, RiskSpec, DisturbanceBox) = match which {
        "bicycle" => (
            Box::new(
                BicycleBenchmark::new(BicycleParams::default(), Bounds::new(vec![0.5, 0.5], vec![4.5, 6.5]).unwrap())
                    .unwrap(),
            ),
            RiskSpec::sigmoid(11.5, 1.0),
            DisturbanceBox { sigma1: (1e-4, 1.0), sigma2: (1e-5, 1e-3) },
        ),
        _ => (
            Box::new(
                SyntheticBenchmark::new(SyntheticSpec::default(), Bounds::cube(100.0, 500.0, 2).unwrap()).unwrap(),
            ),
            RiskSpec::raw(0.3),
            DisturbanceBox { sigma1: (2e-5, 2e-2), sigma2: (7e-6, 7e-3) },
        ),
    };
    let t = Instant::now();
    let grid = grid_samples(bench.bounds(), 30).unwrap();
    let levels = disturbance_grid(&dbox, 5).unwrap();
    let fd = label_grid(bench.as_ref(), &grid, &levels, spec, 1).unwrap();
    println!("falsify {:.1}s risk {}", t.elapsed().as_secs_f64(), fd.risk_indices().len());
    let pts: Vec<Vec<f64>> = grid.iter().map(|z| z.0.clone()).collect();
    let cls: Vec<Class> = fd.labels.iter().map(|l| if l.is_risk() { Class::Risk } else { Class::Safe }).collect();
    let data = TrainingSet::new(&pts, &cls).unwrap();
    let t = Instant::now();
    let cfg = FlowConfig { epochs, ..FlowConfig::default() };
    let (m, rep) = train_flow(bench.bounds(), &data, &cfg, 0).unwrap();
    let acc = m.classify_batch(&pts).iter().zip(&cls).filter(|(c, k)| c.class == **k).count();
    println!(
        "train {:.1}s epochs {} loss {:.4} -> {:.4} acc {}/{}",
        t.elapsed().as_secs_f64(),
        rep.losses.len(),
        rep.losses[0],
        rep.final_loss,
        acc,
        pts.len()
    );
    let mut rng = seeded_rng(3, 0, 0);
    let mut inside = 0;
    let mut safe = 0;
    for _ in 0..2000 {
        let w: Vec<f64> =
            m.mixture.means[1].iter().map(|c| c + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let z = m.forward(&w);
        if bench.bounds().contains(&z) {
            inside += 1;
            if m.classify(&z).class == Class::Safe {
                safe += 1;
            }
        }
    }
    println!("latent safe draws in bounds {inside}/2000, classified safe {safe}");
    let _ = rng.random::<f64>();
}
