//! Boundary-proximity ranking and per-class percentile histograms.
//!
//! Every prototype gets a rank score: the ratio of other-class to same-class
//! members among its K nearest neighbors, with the prototype itself excluded
//! from its own neighborhood and the denominator clamped to at least one.
//! A score of zero means the whole neighborhood shares the prototype's class
//! (deep inside its class); the maximum K means every neighbor disagrees
//! (right on a class boundary).
//!
//! Scores are then histogrammed per class with bin edges at equally spaced
//! percentiles of that class's score distribution, so classes with very
//! different score ranges are normalized before sparsification. Edges are
//! computed once at construction and never change.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::{PrototypeDatabase, PrototypeId};

/// Rank score of one prototype. Scores lie in `[0, K]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankScore {
    pub prototype_id: PrototypeId,
    pub score: f64,
}

/// Per-class percentile histogram over rank scores.
///
/// For each class, `num_bins + 1` edges sit at percentiles
/// `0, 100/N, ..., 100` of the class's scores, and every prototype of the
/// class belongs to exactly one bin. Membership lists are ordered by
/// descending score, ties broken by ascending id — the order in which the
/// sparsifier retains prototypes.
#[derive(Debug, Clone)]
pub struct RankHistogram {
    num_bins: usize,
    class_codes: Vec<u32>,
    /// `edges[class_idx]` has `num_bins + 1` non-decreasing thresholds.
    edges: Vec<Vec<f64>>,
    /// `members[class_idx][bin]`, sorted by (descending score, ascending id).
    members: Vec<Vec<Vec<PrototypeId>>>,
}

impl RankHistogram {
    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    /// Class codes in registry order.
    pub fn class_codes(&self) -> &[u32] {
        &self.class_codes
    }

    pub fn edges_of(&self, class_idx: usize) -> &[f64] {
        &self.edges[class_idx]
    }

    /// Membership of one `(class, bin)` cell.
    pub fn members_of(&self, class_idx: usize, bin: usize) -> &[PrototypeId] {
        &self.members[class_idx][bin]
    }

    /// Total prototypes of one class across all bins.
    pub fn class_size(&self, class_idx: usize) -> usize {
        self.members[class_idx].iter().map(Vec::len).sum()
    }
}

/// Computes the rank score of every prototype using its K nearest neighbors
/// (self excluded). Scores are returned in ascending id order.
pub fn rank_all(db: &PrototypeDatabase, k: usize) -> Result<Vec<RankScore>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if db.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: db.len(),
        });
    }
    (0..db.len() as u64)
        .into_par_iter()
        .map(|id| {
            let neighbors = db.knn(None, db.features_of(id), k, &[id])?;
            let own = db.class_of(id);
            let mut same = 0u64;
            let mut other = 0u64;
            for &nid in &neighbors.ids {
                if db.class_of(nid) == own {
                    same += 1;
                } else {
                    other += 1;
                }
            }
            Ok(RankScore {
                prototype_id: id,
                score: other as f64 / same.max(1) as f64,
            })
        })
        .collect()
}

/// Nearest-rank percentile: the `ceil(p * n / 100)`-th smallest value, with
/// `p = 0` mapping to the minimum.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "percentile of an empty list".into(),
        ));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "percentile {p} outside [0, 100]"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // The epsilon absorbs float error in p*n/100 when the exact rank is an
    // integer (e.g. p = 100/3 with n divisible by 3).
    let rank = ((p * n as f64 / 100.0) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

/// Builds the per-class percentile histogram over rank scores.
///
/// Prototypes whose score ties an interior edge go to the lower-indexed bin.
pub fn build_histogram(
    db: &PrototypeDatabase,
    scores: &[RankScore],
    num_bins: usize,
) -> Result<RankHistogram> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument(
            "histogram needs at least one bin".into(),
        ));
    }
    if scores.len() != db.len() {
        return Err(Error::InvalidArgument(format!(
            "need one score per prototype: {} scores for {} prototypes",
            scores.len(),
            db.len()
        )));
    }
    let mut score_by_id = vec![f64::NAN; db.len()];
    for s in scores {
        let row = s.prototype_id as usize;
        if row >= db.len() || !score_by_id[row].is_nan() {
            return Err(Error::InvalidArgument(format!(
                "scores must cover each prototype id exactly once (id {})",
                s.prototype_id
            )));
        }
        score_by_id[row] = s.score;
    }

    let codes: Vec<u32> = db.class_registry().to_vec();
    let mut edges = Vec::with_capacity(codes.len());
    let mut members = Vec::with_capacity(codes.len());
    for &code in &codes {
        let ids = db.ids_of_class(code);
        let class_scores: Vec<f64> = ids.iter().map(|&id| score_by_id[id as usize]).collect();
        let mut class_edges = Vec::with_capacity(num_bins + 1);
        for i in 0..=num_bins {
            class_edges.push(percentile(&class_scores, 100.0 * i as f64 / num_bins as f64)?);
        }

        let mut bins: Vec<Vec<PrototypeId>> = vec![Vec::new(); num_bins];
        for (&id, &score) in ids.iter().zip(&class_scores) {
            let bin = (0..num_bins)
                .find(|&b| score <= class_edges[b + 1])
                .unwrap_or(num_bins - 1);
            bins[bin].push(id);
        }
        for bin in &mut bins {
            bin.sort_by(|&a, &b| {
                score_by_id[b as usize]
                    .total_cmp(&score_by_id[a as usize])
                    .then(a.cmp(&b))
            });
        }
        edges.push(class_edges);
        members.push(bins);
    }

    Ok(RankHistogram {
        num_bins,
        class_codes: codes,
        edges,
        members,
    })
}

/// Writes the rank export CSV `id,class,score,bin`.
pub fn write_rank_csv<W: std::io::Write>(
    writer: W,
    db: &PrototypeDatabase,
    scores: &[RankScore],
    hist: &RankHistogram,
) -> Result<()> {
    use std::io::Write as _;
    let mut bin_of = vec![usize::MAX; db.len()];
    for (ci, _) in hist.class_codes.iter().enumerate() {
        for b in 0..hist.num_bins {
            for &id in hist.members_of(ci, b) {
                bin_of[id as usize] = b;
            }
        }
    }
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "id,class,score,bin")?;
    for s in scores {
        writeln!(
            w,
            "{},{},{},{}",
            s.prototype_id,
            db.class_of(s.prototype_id),
            s.score,
            bin_of[s.prototype_id as usize]
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Metric;

    fn db_from(rows: Vec<(u32, Vec<f64>)>) -> PrototypeDatabase {
        let dim = rows[0].1.len();
        PrototypeDatabase::from_rows(dim, Metric::Euclidean, rows).unwrap()
    }

    #[test]
    fn all_same_class_neighbors_score_zero() {
        let db = db_from(vec![
            (0, vec![0.0]),
            (0, vec![0.1]),
            (0, vec![0.2]),
            (1, vec![100.0]),
            (1, vec![100.1]),
            (1, vec![100.2]),
        ]);
        let scores = rank_all(&db, 2).unwrap();
        assert!(scores.iter().all(|s| s.score == 0.0));
    }

    #[test]
    fn all_other_class_neighbors_score_k() {
        // A lone class-1 point surrounded by class 0.
        let db = db_from(vec![
            (1, vec![0.0]),
            (0, vec![1.0]),
            (0, vec![2.0]),
            (0, vec![3.0]),
        ]);
        let scores = rank_all(&db, 3).unwrap();
        // Denominator guard forces the divisor to 1.
        assert_eq!(scores[0].score, 3.0);
    }

    #[test]
    fn hand_laid_two_thirds_configuration() {
        // Target at the origin, class 0. K = 5 neighborhood: three class-0
        // points at distances 1, 2, 3 and two class-1 points at 4 and 5.
        // Everything else is far away.
        let db = db_from(vec![
            (0, vec![0.0, 0.0]),
            (0, vec![1.0, 0.0]),
            (0, vec![0.0, 2.0]),
            (0, vec![-3.0, 0.0]),
            (1, vec![0.0, -4.0]),
            (1, vec![5.0, 0.0]),
            (1, vec![200.0, 0.0]),
            (1, vec![0.0, 300.0]),
        ]);
        let scores = rank_all(&db, 5).unwrap();
        assert!((scores[0].score - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rank_requires_two_prototypes() {
        let db = db_from(vec![(0, vec![1.0])]);
        assert!(matches!(
            rank_all(&db, 3),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn percentile_nearest_rank_examples() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 2.0);
        assert_eq!(percentile(&[5.0], 0.0).unwrap(), 5.0);
        assert_eq!(percentile(&[5.0], 37.0).unwrap(), 5.0);
        assert_eq!(percentile(&[5.0], 100.0).unwrap(), 5.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 100.0).unwrap(), 3.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.0).unwrap(), 1.0);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 101.0).is_err());
    }

    #[test]
    fn percentile_exact_thirds_do_not_round_up() {
        let vals: Vec<f64> = (1..=3).map(|v| v as f64).collect();
        // ceil((100/3) * 3 / 100) must be 1 despite float noise.
        assert_eq!(percentile(&vals, 100.0 / 3.0).unwrap(), 1.0);
        assert_eq!(percentile(&vals, 200.0 / 3.0).unwrap(), 2.0);
    }

    fn scores_of(values: &[(u32, f64)]) -> (PrototypeDatabase, Vec<RankScore>) {
        // One dummy feature per prototype; scores are injected directly.
        let rows: Vec<(u32, Vec<f64>)> =
            values.iter().map(|&(c, _)| (c, vec![0.0])).collect();
        let db = db_from(rows);
        let scores = values
            .iter()
            .enumerate()
            .map(|(i, &(_, s))| RankScore {
                prototype_id: i as u64,
                score: s,
            })
            .collect();
        (db, scores)
    }

    #[test]
    fn single_bin_holds_whole_class() {
        let (db, scores) = scores_of(&[(0, 0.3), (0, 1.7), (1, 0.0), (1, 5.0)]);
        let hist = build_histogram(&db, &scores, 1).unwrap();
        assert_eq!(hist.members_of(0, 0).len(), 2);
        assert_eq!(hist.members_of(1, 0).len(), 2);
    }

    #[test]
    fn distinct_scores_split_evenly_into_five_bins() {
        let values: Vec<(u32, f64)> = (0..100).map(|i| (0u32, i as f64)).collect();
        let (db, scores) = scores_of(&values);
        let hist = build_histogram(&db, &scores, 5).unwrap();
        for b in 0..5 {
            assert_eq!(hist.members_of(0, b).len(), 20, "bin {b}");
        }
        // Membership in each bin is descending by score.
        for b in 0..5 {
            let m = hist.members_of(0, b);
            for w in m.windows(2) {
                assert!(scores[w[0] as usize].score >= scores[w[1] as usize].score);
            }
        }
    }

    #[test]
    fn tied_scores_collapse_into_first_bin() {
        let values: Vec<(u32, f64)> = (0..12).map(|_| (0u32, 0.0)).collect();
        let (db, scores) = scores_of(&values);
        let hist = build_histogram(&db, &scores, 4).unwrap();
        assert_eq!(hist.members_of(0, 0).len(), 12);
        for b in 1..4 {
            assert_eq!(hist.members_of(0, b).len(), 0);
        }
        let total: usize = (0..4).map(|b| hist.members_of(0, b).len()).sum();
        assert_eq!(total, 12);
    }

    #[test]
    fn histogram_rejects_zero_bins_and_missing_scores() {
        let (db, scores) = scores_of(&[(0, 0.1), (0, 0.2)]);
        assert!(matches!(
            build_histogram(&db, &scores, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_histogram(&db, &scores[..1], 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn membership_orders_by_descending_score_then_id() {
        let (db, scores) = scores_of(&[(0, 1.0), (0, 1.0), (0, 0.5), (0, 1.0)]);
        let hist = build_histogram(&db, &scores, 1).unwrap();
        assert_eq!(hist.members_of(0, 0), &[0, 1, 3, 2]);
    }
}
