//! Zero-noise failure maps of the bicycle model and true system on a grid.
//!
//! Usage: `bicycle_grid [n] [threshold]`. Parameter overrides come from the
//! environment as TOML, e.g. `BICYCLE='wheelbase = 0.8'`.
use simgap::bench::{Benchmark, BicycleBenchmark, BicycleParams};
use simgap::{Bounds, DisturbanceLevel, EnvPoint};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(30, |a| a.parse().unwrap());
    let th: f64 = args.get(1).map_or(11.5, |a| a.parse().unwrap());
    let params: BicycleParams = toml::from_str(&std::env::var("BICYCLE").unwrap_or_default()).unwrap();
    let bounds = Bounds::new(vec![0.5, 0.5], vec![4.5, 6.5]).unwrap();
    let b = BicycleBenchmark::new(params, bounds).unwrap();
    let t0 = std::time::Instant::now();
    let mut counts = [0usize; 2];
    let mut maps = vec![vec![String::new(); n]; 2];
    let mut cov_map = vec![String::new(); n];
    for j in (0..n).rev() {
        let v = 0.5 + 6.0 * j as f64 / (n - 1) as f64;
        for i in 0..n {
            let w = 0.5 + 4.0 * i as f64 / (n - 1) as f64;
            let z = EnvPoint(vec![w, v]);
            let rm = b.simulate_model(&z, DisturbanceLevel::ZERO, 0);
            let rt = b.simulate_true(&z, 0);
            let risks = [b.risk(&z, &rm), b.risk(&z, &rt)];
            for k in 0..2 {
                let fail = risks[k] > th;
                counts[k] += fail as usize;
                maps[k][n - 1 - j].push(if fail { '#' } else { '.' });
            }
            let c = b.coverage(&z, &rm);
            cov_map[n - 1 - j].push(if risks[0] > th {
                '#'
            } else if c > 1.0 {
                'c'
            } else {
                '.'
            });
        }
    }
    println!("model fails {} true fails {} ({:.1}s)", counts[0], counts[1], t0.elapsed().as_secs_f64());
    println!("rows: v_ref high->low; cols: w low->high   model | true | coverage>1");
    for r in 0..n {
        println!("{} | {} | {}", maps[0][r], maps[1][r], cov_map[r]);
    }
}
