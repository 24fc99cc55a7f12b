//! Scale smoke test: ingest + rank + one energy evaluation at half a
//! million prototypes must finish within 15 minutes and 4 GB.

use std::io::Write;
use std::time::Instant;

use protoselect::{
    build_histogram, evaluate, gen_rays, rank_all, EnergyWeights, Metric, PerturbationConfig,
    PerturbationDims, PrototypeDatabase, RaySpec, SparsificationPlan,
};

/// Peak resident set size in kibibytes, from /proc/self/status.
fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            return rest.trim().trim_end_matches(" kB").trim().parse().ok();
        }
    }
    None
}

#[test]
fn c7_scale_smoke_500k() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let csv_path = tmp.path().join("big.csv");

    // Eight radius classes, 62500 rays each: 500k prototypes, J = 32.
    let gen_started = Instant::now();
    let db_gen = gen_rays(&RaySpec {
        length: 32,
        boundaries: vec![3, 7, 11, 15, 19, 23, 27, 30],
        flip_probability: 0.05,
        samples_per_class: 62_500,
        seed: 99,
    })
    .unwrap();
    assert_eq!(db_gen.len(), 500_000);
    {
        let file = std::fs::File::create(&csv_path).unwrap();
        let mut w = std::io::BufWriter::new(file);
        db_gen.write_csv(&mut w, None).unwrap();
        w.flush().unwrap();
    }
    drop(db_gen);
    let gen_secs = gen_started.elapsed().as_secs_f64();

    // Streamed ingest of the CSV.
    let ingest_started = Instant::now();
    let db = PrototypeDatabase::ingest_csv_path(&csv_path, Metric::Euclidean).unwrap();
    assert_eq!(db.len(), 500_000);
    assert_eq!(db.dimension(), 32);
    let ingest_secs = ingest_started.elapsed().as_secs_f64();

    // Full ranking at K = 10.
    let rank_started = Instant::now();
    let k = 10;
    let scores = rank_all(&db, k).unwrap();
    assert_eq!(scores.len(), db.len());
    let hist = build_histogram(&db, &scores, 5).unwrap();
    let rank_secs = rank_started.elapsed().as_secs_f64();

    // One energy evaluation of a strongly reducing plan; the robustness
    // term uses the seeded two-dimension estimator.
    let energy_started = Instant::now();
    let plan = SparsificationPlan::new(vec![0.2, 0.1, 0.05, 0.02, 0.01]).unwrap();
    let pcfg =
        PerturbationConfig::new(1.0, PerturbationDims::Subset { count: 2, seed: 12 }).unwrap();
    let report = evaluate(
        &db,
        &hist,
        &plan,
        EnergyWeights::new(1.0, 0.001).unwrap(),
        k,
        &pcfg,
    )
    .unwrap();
    assert!(!report.empty_reference);
    assert!(report.total.is_finite());
    let energy_secs = energy_started.elapsed().as_secs_f64();

    let elapsed = started.elapsed().as_secs_f64();
    let rss_kib = peak_rss_kib().unwrap_or(0);
    assert!(
        elapsed < 900.0,
        "scale smoke took {elapsed:.0}s, budget is 15 minutes"
    );
    assert!(
        rss_kib < 4 * 1024 * 1024,
        "peak RSS {rss_kib} KiB exceeds 4 GiB"
    );
    println!(
        "[acceptance] C7 scale smoke: PASS (500k x 32: gen {gen_secs:.0}s, ingest {ingest_secs:.0}s, \
         rank {rank_secs:.0}s, energy {energy_secs:.0}s, total {elapsed:.0}s, peak RSS {} MiB, \
         db {} -> {})",
        rss_kib / 1024,
        db.len(),
        report.db_size
    );
}
