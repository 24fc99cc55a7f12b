//! Deterministic materialization of a sparsified database from per-bin
//! retention fractions.
//!
//! A plan holds one fraction per histogram bin, shared across classes. For
//! each `(class, bin)` cell of size `s`, the first `round(fraction * s)`
//! entries of the cell's (descending score, ascending id) ordering are
//! retained, so raising a fraction can only grow the selection and equal
//! plans always select identical id sets.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::ranking::RankHistogram;
use crate::store::{PrototypeDatabase, PrototypeId};

/// Rounding rule mapping `fraction * bin_size` to a retained count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[non_exhaustive]
pub enum RoundingRule {
    /// Round halves away from zero, clamped to the bin size.
    #[default]
    HalfAwayFromZero,
}

impl RoundingRule {
    pub fn name(self) -> &'static str {
        match self {
            RoundingRule::HalfAwayFromZero => "half-away-from-zero",
        }
    }

    fn apply(self, fraction: f64, size: usize) -> usize {
        // The epsilon keeps products that are mathematically half-integers
        // (e.g. 0.35 * 10) from landing just below the rounding threshold.
        let raw = (fraction * size as f64 + 0.5 + 1e-9).floor();
        (raw.max(0.0) as usize).min(size)
    }
}

/// Per-bin retention fractions, shared across classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsificationPlan {
    fractions: Vec<f64>,
    rounding: RoundingRule,
}

impl SparsificationPlan {
    pub fn new(fractions: Vec<f64>) -> Result<SparsificationPlan> {
        if fractions.is_empty() {
            return Err(Error::InvalidArgument("plan has no bins".into()));
        }
        for &f in &fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!(
                    "retention fraction {f} outside [0, 1]"
                )));
            }
        }
        Ok(SparsificationPlan {
            fractions,
            rounding: RoundingRule::default(),
        })
    }

    /// The identity plan retaining every prototype.
    pub fn identity(num_bins: usize) -> SparsificationPlan {
        SparsificationPlan {
            fractions: vec![1.0; num_bins],
            rounding: RoundingRule::default(),
        }
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn num_bins(&self) -> usize {
        self.fractions.len()
    }

    pub fn rounding(&self) -> RoundingRule {
        self.rounding
    }

    /// Retained count for a bin of `size` members under `fractions[bin]`.
    pub fn retained_count(&self, bin: usize, size: usize) -> usize {
        self.rounding.apply(self.fractions[bin], size)
    }
}

/// The subsampled database: selected ids plus per-cell bookkeeping.
pub struct SparsifiedDatabase<'a> {
    parent: &'a PrototypeDatabase,
    /// Sorted selected ids.
    selected: Vec<PrototypeId>,
    /// `retained[class_idx][bin]`.
    retained: Vec<Vec<usize>>,
    /// `original[class_idx][bin]`.
    original: Vec<Vec<usize>>,
    pub(crate) ref_index: OnceLock<crate::energy::RefIndex>,
}

impl<'a> std::fmt::Debug for SparsifiedDatabase<'a> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparsifiedDatabase")
            .field("selected", &self.selected.len())
            .field("parent_len", &self.parent.len())
            .finish()
    }
}

impl<'a> SparsifiedDatabase<'a> {
    pub fn parent(&self) -> &'a PrototypeDatabase {
        self.parent
    }

    /// Sorted ids retained by the plan.
    pub fn selected_ids(&self) -> &[PrototypeId] {
        &self.selected
    }

    /// `‖DB‖`: number of retained prototypes.
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, id: PrototypeId) -> bool {
        self.selected.binary_search(&id).is_ok()
    }

    pub fn retained_in(&self, class_idx: usize, bin: usize) -> usize {
        self.retained[class_idx][bin]
    }

    pub fn original_in(&self, class_idx: usize, bin: usize) -> usize {
        self.original[class_idx][bin]
    }

    fn num_bins(&self) -> usize {
        self.original.first().map_or(0, Vec::len)
    }

    /// Selection containing the whole parent database.
    pub fn full(parent: &'a PrototypeDatabase) -> SparsifiedDatabase<'a> {
        SparsifiedDatabase {
            parent,
            selected: (0..parent.len() as u64).collect(),
            retained: vec![vec![parent.len()]],
            original: vec![vec![parent.len()]],
            ref_index: OnceLock::new(),
        }
    }

    /// Writes the retained rows in the prototype CSV schema, preserving the
    /// parent's ids.
    pub fn export_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        self.parent.write_csv(writer, Some(&self.selected))
    }
}

/// Applies a plan to a histogram, producing the sparsified database.
pub fn sparsify<'a>(
    db: &'a PrototypeDatabase,
    hist: &RankHistogram,
    plan: &SparsificationPlan,
) -> Result<SparsifiedDatabase<'a>> {
    if plan.num_bins() != hist.num_bins() {
        return Err(Error::InvalidArgument(format!(
            "plan has {} fractions but histogram has {} bins",
            plan.num_bins(),
            hist.num_bins()
        )));
    }
    let mut selected = Vec::new();
    let mut retained = Vec::with_capacity(hist.class_codes().len());
    let mut original = Vec::with_capacity(hist.class_codes().len());
    for class_idx in 0..hist.class_codes().len() {
        let mut class_retained = Vec::with_capacity(hist.num_bins());
        let mut class_original = Vec::with_capacity(hist.num_bins());
        for bin in 0..hist.num_bins() {
            let members = hist.members_of(class_idx, bin);
            let keep = plan.retained_count(bin, members.len());
            selected.extend_from_slice(&members[..keep]);
            class_retained.push(keep);
            class_original.push(members.len());
        }
        retained.push(class_retained);
        original.push(class_original);
    }
    selected.sort_unstable();
    Ok(SparsifiedDatabase {
        parent: db,
        selected,
        retained,
        original,
        ref_index: OnceLock::new(),
    })
}

/// Retention accounting for one bin index, aggregated across classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinReduction {
    pub bin: usize,
    pub original: usize,
    pub retained: usize,
}

impl BinReduction {
    /// Retained share in percent; an empty bin reports zero.
    pub fn percent(&self) -> f64 {
        100.0 * self.retained as f64 / self.original.max(1) as f64
    }
}

/// Per-bin and total retention percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionReport {
    pub bins: Vec<BinReduction>,
    pub total_original: usize,
    pub total_retained: usize,
}

impl ReductionReport {
    pub fn total_percent(&self) -> f64 {
        100.0 * self.total_retained as f64 / self.total_original.max(1) as f64
    }

    /// Size reduction in percent (complement of retention).
    pub fn reduction_percent(&self) -> f64 {
        100.0 - self.total_percent()
    }
}

/// Summarizes how much of each bin survived sparsification.
pub fn reduction_report(s: &SparsifiedDatabase<'_>) -> ReductionReport {
    let num_bins = s.num_bins();
    let mut bins = Vec::with_capacity(num_bins);
    for bin in 0..num_bins {
        let mut original = 0;
        let mut retained = 0;
        for class_idx in 0..s.original.len() {
            original += s.original[class_idx][bin];
            retained += s.retained[class_idx][bin];
        }
        bins.push(BinReduction {
            bin,
            original,
            retained,
        });
    }
    ReductionReport {
        bins,
        total_original: s.parent.len(),
        total_retained: s.len(),
    }
}
