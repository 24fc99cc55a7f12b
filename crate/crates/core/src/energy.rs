//! The selection-quality functional: robustness + alpha * fidelity +
//! beta * sparsity.
//!
//! All three terms are evaluated over the *original* database while the
//! sparsified database serves as the classifier's reference set:
//!
//! * **fidelity** — sum over every original prototype of the squared
//!   difference between its class code and the code the reduced database
//!   assigns it;
//! * **sparsity** — the retained prototype count;
//! * **robustness** — total absolute change in assigned codes when each
//!   query is nudged by `epsilon` along each coordinate axis, penalizing
//!   brittle decision boundaries.
//!
//! A prototype that survived sparsification is excluded from its own
//! neighbor searches; otherwise every retained prototype trivially
//! classifies itself and the fidelity term goes blind. Class codes enter
//! the squared difference as ordinal numerics, which matches databases
//! whose classes are ordered magnitudes; for nominal binary classes the
//! term reduces to a 0/1 loss.

use rayon::prelude::*;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::index::{Candidate, KdTree, TopK};
use crate::ranking::RankHistogram;
use crate::sparsify::{sparsify, SparsificationPlan, SparsifiedDatabase};
use crate::store::{PrototypeDatabase, PrototypeId};

/// Reference-set size above which term evaluation queries a spatial index
/// instead of scanning.
const REF_INDEX_THRESHOLD: usize = 4096;

/// Weighting meta-parameters for the fidelity and sparsity terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl EnergyWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<EnergyWeights> {
        if !alpha.is_finite() || !beta.is_finite() || alpha < 0.0 || beta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weights must be finite and non-negative, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(EnergyWeights { alpha, beta })
    }
}

/// Which coordinate axes the robustness term perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationDims {
    /// Every dimension, the canonical definition.
    All,
    /// A fixed seeded subset of `count` dimensions; the term is rescaled by
    /// `J / count` so it estimates the full sum. The subset is drawn once
    /// and reused for the whole optimization run.
    Subset { count: usize, seed: u64 },
}

/// Step size and axis set for robustness perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    pub epsilon: f64,
    pub dims: PerturbationDims,
}

impl PerturbationConfig {
    pub fn new(epsilon: f64, dims: PerturbationDims) -> Result<PerturbationConfig> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "perturbation step must be positive and finite, got {epsilon}"
            )));
        }
        if let PerturbationDims::Subset { count, .. } = dims {
            if count == 0 {
                return Err(Error::InvalidArgument(
                    "perturbation subset must contain at least one dimension".into(),
                ));
            }
        }
        Ok(PerturbationConfig { epsilon, dims })
    }

    /// Unit-step perturbation over all dimensions.
    pub fn unit() -> PerturbationConfig {
        PerturbationConfig {
            epsilon: 1.0,
            dims: PerturbationDims::All,
        }
    }

    /// The concrete dimension list (ascending) and the rescaling factor.
    pub fn resolve(&self, dimension: usize) -> Result<(Vec<usize>, f64)> {
        match self.dims {
            PerturbationDims::All => Ok(((0..dimension).collect(), 1.0)),
            PerturbationDims::Subset { count, seed } => {
                if count > dimension {
                    return Err(Error::InvalidArgument(format!(
                        "perturbation subset of {count} dimensions exceeds feature dimension {dimension}"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut dims = rand::seq::index::sample(&mut rng, dimension, count).into_vec();
                dims.sort_unstable();
                Ok((dims, dimension as f64 / count as f64))
            }
        }
    }
}

/// The evaluated functional: three terms, weights, and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub robustness_term: f64,
    /// Pre-alpha fidelity sum.
    pub fidelity_term: f64,
    /// Pre-beta retained count.
    pub sparsity_term: usize,
    pub total: f64,
    pub weights: EnergyWeights,
    /// Retained prototype count (equals the sparsity term).
    pub db_size: usize,
    /// Classifier invocations charged to this evaluation.
    pub evaluations: u64,
    /// Set when the plan produced an unusable reference set; `total` is the
    /// infinite-energy sentinel and the terms are meaningless.
    pub empty_reference: bool,
}

/// Total assigned to plans whose reference set cannot classify anything.
pub const ENERGY_SENTINEL: f64 = f64::MAX;

impl EnergyReport {
    fn sentinel(weights: EnergyWeights) -> EnergyReport {
        EnergyReport {
            robustness_term: 0.0,
            fidelity_term: 0.0,
            sparsity_term: 0,
            total: ENERGY_SENTINEL,
            weights,
            db_size: 0,
            evaluations: 0,
            empty_reference: true,
        }
    }
}

/// Compact reference-set view used by every classification in a term
/// evaluation: contiguous copies of the selected rows plus an optional
/// spatial index for large selections.
pub(crate) struct RefIndex {
    ids: Vec<PrototypeId>,
    classes: Vec<u32>,
    /// Row-major `len * dim` copy of the selected feature rows.
    rows: Vec<f64>,
    /// Column-major `dim * len` copy, used by the axis-perturbation scan.
    cols: Vec<f64>,
    dim: usize,
    registry: Vec<u32>,
    kd: Option<KdTree>,
}

impl RefIndex {
    pub(crate) fn build(sel: &SparsifiedDatabase<'_>) -> RefIndex {
        let db = sel.parent();
        let dim = db.dimension();
        let ids: Vec<PrototypeId> = sel.selected_ids().to_vec();
        let n = ids.len();
        let mut rows = Vec::with_capacity(n * dim);
        let mut cols = vec![0.0; n * dim];
        let mut classes = Vec::with_capacity(n);
        for (r, &id) in ids.iter().enumerate() {
            let feat = db.features_of(id);
            rows.extend_from_slice(feat);
            classes.push(db.class_of(id));
            for (d, &v) in feat.iter().enumerate() {
                cols[d * n + r] = v;
            }
        }
        let kd = if n >= REF_INDEX_THRESHOLD {
            Some(KdTree::build(
                dim,
                ids.iter().map(|&id| (id, db.features_of(id))),
            ))
        } else {
            None
        };
        RefIndex {
            ids,
            classes,
            rows,
            cols,
            dim,
            registry: db.class_registry().to_vec(),
            kd,
        }
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn position_of(&self, id: PrototypeId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    fn class_of_id(&self, id: PrototypeId) -> u32 {
        self.classes[self.position_of(id).expect("id in reference set")]
    }

    /// Majority vote over candidates, ties to the smallest class code.
    fn vote(&self, candidates: &[Candidate]) -> Option<u32> {
        if candidates.is_empty() {
            return None;
        }
        let mut counts = vec![0u32; self.registry.len()];
        for c in candidates {
            let class = self.class_of_id(c.id);
            let pos = self
                .registry
                .binary_search(&class)
                .expect("class in registry");
            counts[pos] += 1;
        }
        let mut best = 0;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = i;
            }
        }
        Some(self.registry[best])
    }

    /// Vote counts per registry class over the k nearest; used for metric
    /// scores that need vote shares.
    pub(crate) fn vote_counts(
        &self,
        query: &[f64],
        k: usize,
        exclude: Option<PrototypeId>,
    ) -> Option<Vec<u32>> {
        let cands = self.nearest(query, k, exclude)?;
        let mut counts = vec![0u32; self.registry.len()];
        for c in &cands {
            let class = self.class_of_id(c.id);
            let pos = self
                .registry
                .binary_search(&class)
                .expect("class in registry");
            counts[pos] += 1;
        }
        Some(counts)
    }

    fn nearest(
        &self,
        query: &[f64],
        k: usize,
        exclude: Option<PrototypeId>,
    ) -> Option<Vec<Candidate>> {
        let excluded_pos = exclude.and_then(|id| self.position_of(id));
        let searchable = self.len() - usize::from(excluded_pos.is_some());
        if searchable == 0 {
            return None;
        }
        if let Some(kd) = &self.kd {
            let excl: &[PrototypeId] = match exclude {
                Some(ref id) if excluded_pos.is_some() => std::slice::from_ref(id),
                _ => &[],
            };
            return Some(kd.knn(query, k, excl));
        }
        let mut top = TopK::new(k);
        for r in 0..self.len() {
            if Some(r) == excluded_pos {
                continue;
            }
            let d2 =
                crate::index::squared_distance(&self.rows[r * self.dim..(r + 1) * self.dim], query);
            top.offer(Candidate {
                d2,
                id: self.ids[r],
            });
        }
        Some(top.into_sorted())
    }

    /// Classifies a query; `None` when nothing is searchable.
    pub(crate) fn classify(
        &self,
        query: &[f64],
        k: usize,
        exclude: Option<PrototypeId>,
    ) -> Option<u32> {
        self.nearest(query, k, exclude).and_then(|c| self.vote(&c))
    }

    /// Squared distances from `query` to every reference row, in row order.
    fn base_distances(&self, query: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.reserve(self.len());
        for r in 0..self.len() {
            out.push(crate::index::squared_distance(
                &self.rows[r * self.dim..(r + 1) * self.dim],
                query,
            ));
        }
    }

    fn classify_from_d2(&self, d2: &[f64], k: usize, excluded_pos: Option<usize>) -> Option<u32> {
        let mut top = TopK::new(k);
        for (r, &v) in d2.iter().enumerate() {
            if Some(r) == excluded_pos {
                continue;
            }
            top.offer(Candidate {
                d2: v,
                id: self.ids[r],
            });
        }
        let cands = top.into_sorted();
        self.vote(&cands)
    }

    /// Classifies `query + epsilon * e_dim` from the precomputed base
    /// distances: shifting one coordinate changes each squared distance by
    /// `2 * epsilon * (q_dim - p_dim) + epsilon^2`, so the scan is O(len)
    /// instead of O(len * dim).
    fn classify_perturbed_from_d2(
        &self,
        d2: &[f64],
        query_dim_value: f64,
        dim: usize,
        epsilon: f64,
        k: usize,
        excluded_pos: Option<usize>,
    ) -> Option<u32> {
        let col = &self.cols[dim * self.len()..(dim + 1) * self.len()];
        let eps2 = epsilon * epsilon;
        let two_eps = 2.0 * epsilon;
        let mut top = TopK::new(k);
        for (r, (&base, &p)) in d2.iter().zip(col.iter()).enumerate() {
            if Some(r) == excluded_pos {
                continue;
            }
            let v = base + two_eps * (query_dim_value - p) + eps2;
            top.offer(Candidate {
                d2: v,
                id: self.ids[r],
            });
        }
        let cands = top.into_sorted();
        self.vote(&cands)
    }
}

pub(crate) fn ref_index<'s>(sel: &'s SparsifiedDatabase<'_>) -> &'s RefIndex {
    sel.ref_index.get_or_init(|| RefIndex::build(sel))
}

/// Classifies a query against the sparsified reference set: majority vote
/// over the K nearest retained prototypes, ties to the smallest class code.
/// The winning code is returned as a real number so squared differences on
/// ordinal codes are well-defined.
pub fn classify(
    reference: &SparsifiedDatabase<'_>,
    query: &[f64],
    k: usize,
    exclude: &[PrototypeId],
) -> Result<f64> {
    if query.len() != reference.parent().dimension() {
        return Err(Error::DimensionMismatch {
            expected: reference.parent().dimension(),
            actual: query.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let idx = ref_index(reference);
    let code = match exclude {
        [] => idx.classify(query, k, None),
        [id] => idx.classify(query, k, Some(*id)),
        many => {
            // General exclusion sets fall back to the parent's query path.
            let res = reference
                .parent()
                .knn(Some(reference.selected_ids()), query, k, many)?;
            let mut counts = vec![0u32; reference.parent().class_registry().len()];
            for &nid in &res.ids {
                let class = reference.parent().class_of(nid);
                let pos = reference
                    .parent()
                    .class_registry()
                    .binary_search(&class)
                    .expect("class in registry");
                counts[pos] += 1;
            }
            let mut best = 0;
            for (i, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = i;
                }
            }
            Some(reference.parent().class_registry()[best])
        }
    };
    code.map(|c| c as f64).ok_or(Error::EmptySearchSet)
}

/// Fidelity term: sum over every original prototype of the squared
/// difference between its class code and the reduced-database vote, with
/// the prototype left out of its own reference search.
pub fn fidelity(db: &PrototypeDatabase, reference: &SparsifiedDatabase<'_>, k: usize) -> Result<f64> {
    check_same_parent(db, reference)?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let idx = ref_index(reference);
    let terms: Result<Vec<f64>> = (0..db.len() as u64)
        .into_par_iter()
        .map(|id| {
            let f = idx
                .classify(db.features_of(id), k, Some(id))
                .ok_or(Error::EmptySearchSet)?;
            let diff = db.class_of(id) as f64 - f as f64;
            Ok(diff * diff)
        })
        .collect();
    Ok(terms?.iter().sum())
}

/// Robustness term: total absolute vote change under single-axis
/// perturbations of every original prototype.
pub fn robustness(
    db: &PrototypeDatabase,
    reference: &SparsifiedDatabase<'_>,
    k: usize,
    pcfg: &PerturbationConfig,
) -> Result<f64> {
    check_same_parent(db, reference)?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let (dims, scale) = pcfg.resolve(db.dimension())?;
    let idx = ref_index(reference);
    let terms: Result<Vec<f64>> = (0..db.len() as u64)
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(base_d2, pquery), id| {
                row_robustness(idx, db, id, k, &dims, pcfg.epsilon, base_d2, pquery)
            },
        )
        .collect();
    Ok(scale * terms?.iter().sum::<f64>())
}

#[allow(clippy::too_many_arguments)]
fn row_robustness(
    idx: &RefIndex,
    db: &PrototypeDatabase,
    id: PrototypeId,
    k: usize,
    dims: &[usize],
    epsilon: f64,
    base_d2: &mut Vec<f64>,
    pquery: &mut Vec<f64>,
) -> Result<f64> {
    let query = db.features_of(id);
    let excluded_pos = idx.position_of(id);
    let searchable = idx.len() - usize::from(excluded_pos.is_some());
    if searchable == 0 {
        return Err(Error::EmptySearchSet);
    }
    if idx.kd.is_some() {
        let excl: &[PrototypeId] = if excluded_pos.is_some() {
            std::slice::from_ref(&id)
        } else {
            &[]
        };
        let kd = idx.kd.as_ref().expect("checked");
        let f_base = idx.vote(&kd.knn(query, k, excl)).expect("nonempty");
        let mut acc = 0.0;
        pquery.clear();
        pquery.extend_from_slice(query);
        for &d in dims {
            pquery[d] = query[d] + epsilon;
            let f_pert = idx.vote(&kd.knn(pquery, k, excl)).expect("nonempty");
            acc += (f_base as f64 - f_pert as f64).abs();
            pquery[d] = query[d];
        }
        Ok(acc)
    } else {
        idx.base_distances(query, base_d2);
        let f_base = idx
            .classify_from_d2(base_d2, k, excluded_pos)
            .expect("nonempty");
        let mut acc = 0.0;
        for &d in dims {
            let f_pert = idx
                .classify_perturbed_from_d2(base_d2, query[d], d, epsilon, k, excluded_pos)
                .expect("nonempty");
            acc += (f_base as f64 - f_pert as f64).abs();
        }
        Ok(acc)
    }
}

fn check_same_parent(db: &PrototypeDatabase, reference: &SparsifiedDatabase<'_>) -> Result<()> {
    if !std::ptr::eq(db, reference.parent()) {
        return Err(Error::InvalidArgument(
            "reference set was not derived from this database".into(),
        ));
    }
    Ok(())
}

/// Sparsifies by `plan` and evaluates the full functional.
///
/// A plan that yields an unusable reference set (empty, or a single
/// prototype that can only ever see itself) produces the infinite-energy
/// sentinel instead of an error, so optimizers can probe and reject it.
pub fn evaluate(
    db: &PrototypeDatabase,
    hist: &RankHistogram,
    plan: &SparsificationPlan,
    weights: EnergyWeights,
    k: usize,
    pcfg: &PerturbationConfig,
) -> Result<EnergyReport> {
    let reference = sparsify(db, hist, plan)?;
    evaluate_selection(db, &reference, weights, k, pcfg)
}

/// Evaluates the functional for an already-materialized selection.
pub fn evaluate_selection(
    db: &PrototypeDatabase,
    reference: &SparsifiedDatabase<'_>,
    weights: EnergyWeights,
    k: usize,
    pcfg: &PerturbationConfig,
) -> Result<EnergyReport> {
    check_same_parent(db, reference)?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if reference.is_empty() {
        return Ok(EnergyReport::sentinel(weights));
    }
    let (dims, scale) = pcfg.resolve(db.dimension())?;
    let idx = ref_index(reference);

    // One pass computes both terms; the base classification is shared.
    let per_row: Result<Vec<(f64, f64)>> = (0..db.len() as u64)
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(base_d2, pquery), id| {
                let query = db.features_of(id);
                let excluded_pos = idx.position_of(id);
                if idx.len() - usize::from(excluded_pos.is_some()) == 0 {
                    return Err(Error::EmptySearchSet);
                }
                let (f_base, rob) = if idx.kd.is_some() {
                    let kd = idx.kd.as_ref().expect("checked");
                    let excl: &[PrototypeId] = if excluded_pos.is_some() {
                        std::slice::from_ref(&id)
                    } else {
                        &[]
                    };
                    let f_base = idx.vote(&kd.knn(query, k, excl)).expect("nonempty");
                    let mut acc = 0.0;
                    pquery.clear();
                    pquery.extend_from_slice(query);
                    for &d in &dims {
                        pquery[d] = query[d] + pcfg.epsilon;
                        let f_pert = idx.vote(&kd.knn(pquery, k, excl)).expect("nonempty");
                        acc += (f_base as f64 - f_pert as f64).abs();
                        pquery[d] = query[d];
                    }
                    (f_base, acc)
                } else {
                    idx.base_distances(query, base_d2);
                    let f_base = idx
                        .classify_from_d2(base_d2, k, excluded_pos)
                        .expect("nonempty");
                    let mut acc = 0.0;
                    for &d in &dims {
                        let f_pert = idx
                            .classify_perturbed_from_d2(
                                base_d2,
                                query[d],
                                d,
                                pcfg.epsilon,
                                k,
                                excluded_pos,
                            )
                            .expect("nonempty");
                        acc += (f_base as f64 - f_pert as f64).abs();
                    }
                    (f_base, acc)
                };
                let diff = db.class_of(id) as f64 - f_base as f64;
                Ok((diff * diff, rob))
            },
        )
        .collect();

    let per_row = match per_row {
        Ok(rows) => rows,
        Err(Error::EmptySearchSet) => return Ok(EnergyReport::sentinel(weights)),
        Err(e) => return Err(e),
    };

    // Summed in row order so the result is independent of thread count.
    let fidelity_term: f64 = per_row.iter().map(|r| r.0).sum();
    let robustness_term: f64 = scale * per_row.iter().map(|r| r.1).sum::<f64>();
    let sparsity_term = reference.len();
    let total = robustness_term + weights.alpha * fidelity_term + weights.beta * sparsity_term as f64;
    let evaluations = db.len() as u64 * (1 + dims.len() as u64);
    Ok(EnergyReport {
        robustness_term,
        fidelity_term,
        sparsity_term,
        total,
        weights,
        db_size: sparsity_term,
        evaluations,
        empty_reference: false,
    })
}
