//! Downstream classifier evaluation: accuracy, per-class precision and
//! recall, confusion matrix, and binary ROC AUC over vote shares.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sparsify::SparsifiedDatabase;
use crate::store::PrototypeDatabase;

/// Precision/recall for one class code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class_code: u32,
    pub precision: f64,
    pub recall: f64,
    /// Test prototypes carrying this class.
    pub support: usize,
}

/// Test-set evaluation of a KNN classifier backed by a reference selection.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    /// Mean per-class recall over classes present in the test set
    /// (the multi-class "macro accuracy").
    pub macro_recall: f64,
    /// Rank-statistic ROC AUC over positive-class vote shares; present only
    /// for binary problems (the larger class code is positive).
    pub auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[actual][predicted]` over `codes`.
    pub confusion: Vec<Vec<usize>>,
    /// Sorted class codes indexing the confusion matrix.
    pub codes: Vec<u32>,
    /// Size of the reference selection.
    pub db_size: usize,
}

impl MetricReport {
    /// One machine-readable row for benchmark tables.
    pub fn summary_row(&self) -> String {
        format!(
            "accuracy={} macro_recall={} auc={} db_size={}",
            self.accuracy,
            self.macro_recall,
            self.auc.map_or_else(|| "-".to_string(), |a| a.to_string()),
            self.db_size
        )
    }

    /// Structured key/value text block.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "accuracy {}", self.accuracy)?;
        writeln!(w, "macro_recall {}", self.macro_recall)?;
        match self.auc {
            Some(a) => writeln!(w, "auc {a}")?,
            None => writeln!(w, "auc -")?,
        }
        writeln!(w, "db_size {}", self.db_size)?;
        for c in &self.per_class {
            writeln!(
                w,
                "class {} precision {} recall {} support {}",
                c.class_code, c.precision, c.recall, c.support
            )?;
        }
        write!(w, "confusion")?;
        for &c in &self.codes {
            write!(w, " {c}")?;
        }
        writeln!(w)?;
        for (i, row) in self.confusion.iter().enumerate() {
            write!(w, "actual {}", self.codes[i])?;
            for &v in row {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Rank-statistic (Mann-Whitney) ROC AUC with midranks for ties.
///
/// `scores` and `positive` are parallel; returns `None` when either class
/// is absent. Because only score ranks matter, the result is invariant
/// under any strictly monotone transform of the scores.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Midrank of the tied block [i, j), 1-based ranks.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if positive[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Classifies every test prototype against the reference selection and
/// aggregates the standard metrics.
pub fn evaluate_classifier(
    reference: &SparsifiedDatabase<'_>,
    test: &PrototypeDatabase,
    k: usize,
) -> Result<MetricReport> {
    if reference.is_empty() {
        return Err(Error::EmptySearchSet);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if test.dimension() != reference.parent().dimension() {
        return Err(Error::DimensionMismatch {
            expected: reference.parent().dimension(),
            actual: test.dimension(),
        });
    }

    let parent_registry = reference.parent().class_registry();
    let mut codes: Vec<u32> = parent_registry.to_vec();
    codes.extend_from_slice(test.class_registry());
    codes.sort_unstable();
    codes.dedup();

    let idx = crate::energy::ref_index(reference);
    // (predicted_code, positive_vote_share) per test row.
    let rows: Result<Vec<(u32, f64)>> = (0..test.len() as u64)
        .into_par_iter()
        .map(|id| {
            let counts = idx
                .vote_counts(test.features_of(id), k, None)
                .ok_or(Error::EmptySearchSet)?;
            let winner = vote_winner(parent_registry, &counts);
            let total: u32 = counts.iter().sum();
            // Vote share of the largest code among the union classes; only
            // meaningful for binary problems.
            let positive_code = *codes.last().expect("nonempty codes");
            let share = match parent_registry.binary_search(&positive_code) {
                Ok(pos) => counts[pos] as f64 / total.max(1) as f64,
                Err(_) => 0.0,
            };
            Ok((winner, share))
        })
        .collect();
    let rows = rows?;

    let code_pos = |c: u32| codes.binary_search(&c).expect("code in union");
    let mut confusion = vec![vec![0usize; codes.len()]; codes.len()];
    let mut correct = 0usize;
    for (id, (pred, _)) in rows.iter().enumerate() {
        let actual = test.class_of(id as u64);
        confusion[code_pos(actual)][code_pos(*pred)] += 1;
        if actual == *pred {
            correct += 1;
        }
    }

    let mut per_class = Vec::with_capacity(codes.len());
    let mut recall_sum = 0.0;
    let mut recall_classes = 0usize;
    for (ci, &code) in codes.iter().enumerate() {
        let support: usize = confusion[ci].iter().sum();
        let tp = confusion[ci][ci];
        let predicted: usize = confusion.iter().map(|row| row[ci]).sum();
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        if support > 0 {
            recall_sum += recall;
            recall_classes += 1;
        }
        per_class.push(ClassMetrics {
            class_code: code,
            precision,
            recall,
            support,
        });
    }

    let auc = if codes.len() == 2 {
        let positive_code = codes[1];
        let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let positive: Vec<bool> = (0..test.len() as u64)
            .map(|id| test.class_of(id) == positive_code)
            .collect();
        roc_auc(&scores, &positive)
    } else {
        None
    };

    Ok(MetricReport {
        accuracy: correct as f64 / test.len() as f64,
        macro_recall: if recall_classes > 0 {
            recall_sum / recall_classes as f64
        } else {
            0.0
        },
        auc,
        per_class,
        confusion,
        codes,
        db_size: reference.len(),
    })
}

/// Majority vote over per-registry-class counts, ties to the smallest code.
pub(crate) fn vote_winner(registry: &[u32], counts: &[u32]) -> u32 {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    registry[best]
}
