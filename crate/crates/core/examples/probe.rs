use protoselect::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut worst: (f64, usize) = (1.0, 0);
    let mut failures = 0;
    for fixture in 0..60usize {
        let mut rng = ChaCha8Rng::seed_from_u64(40_000 + fixture as u64);
        let bins = 1 + fixture % 3;
        let per_class = rng.random_range(10..=50);
        let gap = rng.random_range(0.8..3.0);
        let classes = 2 + fixture % 2;
        let dim = rng.random_range(2..=4);
        let mut means = Vec::new();
        for c in 0..classes {
            let mut m = vec![0.0; dim];
            m[0] = c as f64 * gap;
            means.push(m);
        }
        let db = gen_blobs(&BlobSpec {
            dimension: dim, means, stds: vec![1.0; classes],
            samples_per_class: per_class, seed: 777 + fixture as u64,
        }).unwrap();
        if db.len() > 100 { continue; }
        let k = rng.random_range(1..=8);
        let alpha = 10f64.powf(rng.random_range(-1.0..1.0));
        let beta = 10f64.powf(rng.random_range(-2.0..0.0));
        let scores = rank_all(&db, k).unwrap();
        let hist = build_histogram(&db, &scores, bins).unwrap();
        let weights = EnergyWeights::new(alpha, beta).unwrap();
        let pcfg = PerturbationConfig::unit();

        let cfg = OptimizerConfig { max_evaluations: 2500, seed: fixture as u64, ..OptimizerConfig::default() };
        let (_, trace) = minimize_inner(&db, &hist, weights, k, &pcfg, &cfg).unwrap();

        let mut grid_min = f64::MAX;
        let mut idx = vec![0usize; bins];
        loop {
            let plan = SparsificationPlan::new(idx.iter().map(|&i| i as f64 / 10.0).collect()).unwrap();
            let rep = evaluate(&db, &hist, &plan, weights, k, &pcfg).unwrap();
            grid_min = grid_min.min(rep.total);
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] <= 10 { break; }
                idx[d] = 0; d += 1;
                if d == bins { break; }
            }
            if d == bins { break; }
        }
        let got = trace.best_report.total;
        let ratio = if grid_min > 0.0 { got / grid_min } else if got <= grid_min { 1.0 } else { 2.0 };
        if ratio > worst.0 { worst = (ratio, fixture); }
        if got > grid_min * 1.05 + 1e-12 {
            failures += 1;
            println!("FIXTURE {fixture}: bins={bins} returned {got} vs grid {grid_min} (ratio {ratio:.4}) evals={}", trace.records.len());
        }
    }
    println!("worst ratio {:.4} at fixture {}; {failures} failures over 60", worst.0, worst.1);
}
