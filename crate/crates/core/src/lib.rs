//! Shrinks a K-nearest-neighbor prototype database while preserving its
//! classification behavior.
//!
//! The pipeline has four stages:
//!
//! 1. **Rank** ([`ranking`]) — score every prototype by how close it sits to
//!    a class boundary: the ratio of other-class to same-class members among
//!    its K nearest neighbors.
//! 2. **Bin** ([`ranking::build_histogram`]) — histogram the scores per
//!    class with bin edges at fixed percentiles, so every class is divided
//!    into N comparable rank bands.
//! 3. **Sparsify** ([`sparsify`]) — retain a per-bin fraction of each band,
//!    highest scores first, producing a reduced reference database.
//! 4. **Optimize** ([`optimizer`]) — search the retention fractions with a
//!    derivative-free bound-constrained method minimizing
//!    `robustness + alpha * fidelity + beta * sparsity` ([`energy`]), and
//!    tune `(alpha, beta)` in an outer loop against a held-out validation
//!    metric ([`metrics`]).
//!
//! [`datagen`] provides seeded synthetic benchmarks (Gaussian blobs and
//! noisy binary rays) and deterministic train/validate/test splits.
//!
//! ```
//! use protoselect::{
//!     build_histogram, evaluate, rank_all, sparsify, EnergyWeights,
//!     Metric, PerturbationConfig, PrototypeDatabase, SparsificationPlan,
//! };
//!
//! # fn main() -> protoselect::Result<()> {
//! let csv = "id,class,f0,f1\n\
//!            0,0,0.0,0.0\n1,0,0.2,0.1\n2,0,0.1,0.3\n\
//!            3,1,4.0,4.0\n4,1,4.2,4.1\n5,1,4.1,4.3\n";
//! let db = PrototypeDatabase::ingest_csv(csv.as_bytes(), Metric::Euclidean)?;
//! let scores = rank_all(&db, 2)?;
//! let hist = build_histogram(&db, &scores, 2)?;
//! let plan = SparsificationPlan::new(vec![1.0, 0.5])?;
//! let report = evaluate(
//!     &db,
//!     &hist,
//!     &plan,
//!     EnergyWeights::new(1.0, 0.01)?,
//!     2,
//!     &PerturbationConfig::unit(),
//! )?;
//! assert!(report.total >= 0.0);
//! # Ok(())
//! # }
//! ```

pub mod datagen;
pub mod energy;
mod error;
mod index;
pub mod metrics;
pub mod optimizer;
pub mod ranking;
pub mod sparsify;
pub mod store;

pub use datagen::{gen_blobs, gen_rays, split, BlobSpec, DatabaseSplit, RaySpec, SplitFractions};
pub use energy::{
    classify, evaluate, evaluate_selection, fidelity, robustness, EnergyReport, EnergyWeights,
    PerturbationConfig, PerturbationDims, ENERGY_SENTINEL,
};
pub use error::{Error, Result};
pub use metrics::{evaluate_classifier, roc_auc, ClassMetrics, MetricReport};
pub use optimizer::{
    minimize_inner, optimize_outer, read_trace, write_trace, Minimizer, OptimizationTrace,
    OptimizerConfig, OuterCell, OuterConfig, OuterResult, ParsedTraceRecord, SearchState,
    TraceRecord, ValidationMetric,
};
pub use ranking::{build_histogram, percentile, rank_all, write_rank_csv, RankHistogram, RankScore};
pub use sparsify::{
    reduction_report, sparsify, BinReduction, ReductionReport, RoundingRule, SparsificationPlan,
    SparsifiedDatabase,
};
pub use store::{
    distance, Metric, NeighborResult, Prototype, PrototypeDatabase, PrototypeId, INDEX_THRESHOLD,
};

#[cfg(doctest)]
pub mod book_doctests {
    //! Keeps the book's code snippets compiling and passing; each chapter
    //! is included as rustdoc and its fenced Rust blocks run as doctests.
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/database.md")]
    pub mod database {}
    #[doc = include_str!("../../../book/src/ranking.md")]
    pub mod ranking {}
    #[doc = include_str!("../../../book/src/sparsification.md")]
    pub mod sparsification {}
    #[doc = include_str!("../../../book/src/energy.md")]
    pub mod energy {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    pub mod optimization {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    pub mod synthetic_data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
