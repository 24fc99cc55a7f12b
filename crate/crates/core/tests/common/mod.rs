//! Independent brute-force oracles for the integration suites.
//!
//! Everything here works from first principles on plain `(id, features,
//! class)` triples pulled out of a database through its public accessors:
//! full distance lists sorted by `(distance, id)`, explicit perturbed
//! queries, and hand-rolled vote counting. Nothing reuses the library's
//! query or evaluation paths.

#![allow(dead_code)]

use protoselect::{Metric, PrototypeDatabase};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub type Row = (u64, Vec<f64>, u32);

/// Copies a database into plain rows.
pub fn rows_of(db: &PrototypeDatabase) -> Vec<Row> {
    (0..db.len() as u64)
        .map(|id| (id, db.features_of(id).to_vec(), db.class_of(id)))
        .collect()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The k nearest rows by full sort of every `(distance^2, id)` pair.
pub fn oracle_knn(rows: &[Row], query: &[f64], k: usize, exclude: &[u64]) -> Vec<(f64, u64)> {
    let mut all: Vec<(f64, u64)> = rows
        .iter()
        .filter(|(id, _, _)| !exclude.contains(id))
        .map(|(id, feat, _)| (dist2(feat, query), *id))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

/// Majority vote over the k nearest, ties to the smallest class code.
pub fn oracle_classify(reference: &[Row], query: &[f64], k: usize, exclude: &[u64]) -> Option<u32> {
    let nearest = oracle_knn(reference, query, k, exclude);
    if nearest.is_empty() {
        return None;
    }
    let class_of = |id: u64| {
        reference
            .iter()
            .find(|(rid, _, _)| *rid == id)
            .expect("id present")
            .2
    };
    let mut tally: Vec<(u32, usize)> = Vec::new();
    for (_, id) in &nearest {
        let c = class_of(*id);
        match tally.iter_mut().find(|(code, _)| *code == c) {
            Some((_, n)) => *n += 1,
            None => tally.push((c, 1)),
        }
    }
    tally.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Some(tally[0].0)
}

/// Boundary-ratio rank of every row: other-class over same-class neighbor
/// counts among the k nearest (self excluded), denominator clamped to one.
pub fn oracle_rank(rows: &[Row], k: usize) -> Vec<f64> {
    rows.iter()
        .map(|(id, feat, class)| {
            let nearest = oracle_knn(rows, feat, k, &[*id]);
            let mut same = 0u64;
            let mut other = 0u64;
            for (_, nid) in &nearest {
                let nclass = rows
                    .iter()
                    .find(|(rid, _, _)| rid == nid)
                    .expect("id present")
                    .2;
                if nclass == *class {
                    same += 1;
                } else {
                    other += 1;
                }
            }
            other as f64 / same.max(1) as f64
        })
        .collect()
}

/// Fidelity term by explicit re-query: sum of squared code differences with
/// leave-self-out.
pub fn oracle_fidelity(all: &[Row], reference: &[Row], k: usize) -> Option<f64> {
    let mut sum = 0.0;
    for (id, feat, class) in all {
        let f = oracle_classify(reference, feat, k, &[*id])?;
        let d = *class as f64 - f as f64;
        sum += d * d;
    }
    Some(sum)
}

/// Robustness term by explicit perturbed queries over the given dimensions.
pub fn oracle_robustness(
    all: &[Row],
    reference: &[Row],
    k: usize,
    epsilon: f64,
    dims: &[usize],
    scale: f64,
) -> Option<f64> {
    let mut sum = 0.0;
    for (id, feat, _) in all {
        let base = oracle_classify(reference, feat, k, &[*id])?;
        for &d in dims {
            let mut q = feat.clone();
            q[d] += epsilon;
            let pert = oracle_classify(reference, &q, k, &[*id])?;
            sum += (base as f64 - pert as f64).abs();
        }
    }
    Some(scale * sum)
}

/// Standard leave-one-out KNN squared error over a database, written
/// directly from the definition (no sparsification machinery involved).
pub fn oracle_loo_squared_error(rows: &[Row], k: usize) -> f64 {
    let mut sum = 0.0;
    for (id, feat, class) in rows {
        let f = oracle_classify(rows, feat, k, &[*id]).expect("more than one row");
        let d = *class as f64 - f as f64;
        sum += d * d;
    }
    sum
}

/// Uniformly random labeled points in `[-1, 1]^dim`.
pub fn random_db(m: usize, dim: usize, classes: u32, seed: u64) -> PrototypeDatabase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<(u32, Vec<f64>)> = (0..m)
        .map(|_| {
            let class = rng.random_range(0..classes);
            let feat = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            (class, feat)
        })
        .collect();
    PrototypeDatabase::from_rows(dim, Metric::Euclidean, rows).unwrap()
}

/// Two slightly separated Gaussian clusters; harder than `random_db` for
/// classification-sensitive fixtures.
pub fn two_cluster_db(m_per_class: usize, dim: usize, gap: f64, std: f64, seed: u64) -> PrototypeDatabase {
    let mut means = vec![vec![0.0; dim], vec![0.0; dim]];
    means[1][0] = gap;
    protoselect::gen_blobs(&protoselect::BlobSpec {
        dimension: dim,
        means,
        stds: vec![std, std],
        samples_per_class: m_per_class,
        seed,
    })
    .unwrap()
}
