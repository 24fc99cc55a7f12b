//! Derivative-free minimization of the energy functional.
//!
//! The inner loop searches retention-fraction space `[0,1]^N` with a
//! bound-constrained compass (coordinate pattern) search: probe each
//! coordinate in both directions, accept strictly improving candidates,
//! halve the step after a full round of rejections, and stop when the step
//! falls below the configured minimum or the evaluation budget runs out.
//! The energy is piecewise constant in the fractions (counts only change
//! when `round(fraction * bin_size)` does), which is exactly why a
//! derivative-free method is required here.
//!
//! The outer loop tunes the two term weights against a held-out validation
//! metric on a log-spaced grid, refined once around the best cell.
//!
//! Evaluated plans are cached by their per-(class, bin) retained counts:
//! the three energy terms depend only on the realized selection, so probes
//! that round to the same counts — and the same plans revisited under
//! different weights — cost nothing.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::prelude::*;

use crate::energy::{
    evaluate, EnergyReport, EnergyWeights, PerturbationConfig, ENERGY_SENTINEL,
};
use crate::error::{Error, Result};
use crate::metrics::evaluate_classifier;
use crate::ranking::RankHistogram;
use crate::sparsify::{sparsify, SparsificationPlan};
use crate::store::PrototypeDatabase;

/// Inner-loop search settings.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    /// Maximum number of energy evaluations (probes), including the
    /// initial plan. Must be at least `N + 1`.
    pub max_evaluations: usize,
    /// Starting plan; defaults to all ones (the full database).
    pub initial_plan: Option<Vec<f64>>,
    /// Initial probe step in fraction space, in `(0, 1]`.
    pub initial_step: f64,
    /// Convergence threshold: a start stops once the step drops below it.
    pub min_step: f64,
    /// Seeds the random restart points.
    pub seed: u64,
    /// Additional seeded random starts after the structured ones. The
    /// energy is piecewise constant and multi-modal, so the search polls
    /// from several deterministic starts and keeps the best: the initial
    /// plan, one single-bin profile per bin, and this many random points.
    pub restarts: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_evaluations: 400,
            initial_plan: None,
            initial_step: 0.25,
            min_step: 1e-3,
            seed: 0,
            restarts: 2,
        }
    }
}

/// One evaluated probe. `start` identifies the search start the probe
/// belongs to; acceptance is relative to that start's own incumbent.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub plan: Vec<f64>,
    pub report: EnergyReport,
    pub accepted: bool,
    pub start: u32,
}

/// Complete record of one inner-loop run.
#[derive(Debug, Clone)]
pub struct OptimizationTrace {
    pub records: Vec<TraceRecord>,
    pub best_plan: Vec<f64>,
    pub best_report: EnergyReport,
    pub seed: u64,
    /// True when the step shrank below `min_step`; false when the budget
    /// ran out first.
    pub converged: bool,
}

/// Incumbent-tracking acceptance logic shared by every pattern search.
///
/// A candidate is accepted iff its total is strictly below the incumbent's,
/// so re-probes of the incumbent and sentinel-energy candidates are always
/// rejected. Acceptance expands the step modestly; a full round of
/// rejections is signalled with [`SearchState::shrink`].
#[derive(Debug, Clone)]
pub struct SearchState {
    incumbent: Vec<f64>,
    incumbent_total: f64,
    step: f64,
    min_step: f64,
}

impl SearchState {
    pub fn new(incumbent: Vec<f64>, incumbent_total: f64, step: f64, min_step: f64) -> SearchState {
        SearchState {
            incumbent,
            incumbent_total,
            step,
            min_step,
        }
    }

    pub fn incumbent(&self) -> &[f64] {
        &self.incumbent
    }

    pub fn incumbent_total(&self) -> f64 {
        self.incumbent_total
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Accepts the candidate iff it strictly improves the incumbent.
    pub fn consider(&mut self, candidate: &[f64], total: f64) -> bool {
        if total < self.incumbent_total {
            self.incumbent.clear();
            self.incumbent.extend_from_slice(candidate);
            self.incumbent_total = total;
            self.step = (self.step * 2.0).min(1.0);
            true
        } else {
            false
        }
    }

    /// Halves the step; returns false once it falls below the minimum.
    pub fn shrink(&mut self) -> bool {
        self.step *= 0.5;
        self.step >= self.min_step
    }
}

/// Generic bound-constrained compass search over `[0,1]^n`.
///
/// `eval` returns the objective total plus an arbitrary payload that is
/// handed to `on_probe` together with the acceptance decision. Returns the
/// best point, its payload, and whether the step converged below minimum.
pub(crate) fn compass_search<P: Clone>(
    initial: Vec<f64>,
    initial_step: f64,
    min_step: f64,
    budget: usize,
    mut eval: impl FnMut(&[f64]) -> (f64, P),
    mut on_probe: impl FnMut(&[f64], &P, f64, bool),
) -> (Vec<f64>, f64, P, bool) {
    let n = initial.len();
    let (t0, p0) = eval(&initial);
    on_probe(&initial, &p0, t0, true);
    let mut used = 1usize;
    let mut state = SearchState::new(initial, t0, initial_step, min_step);
    let mut best_payload = p0;
    let mut converged = false;

    'outer: loop {
        let mut any_accept = false;
        for dim in 0..n {
            for sign in [1.0f64, -1.0] {
                let current = state.incumbent()[dim];
                let probed = (current + sign * state.step()).clamp(0.0, 1.0);
                if probed == current {
                    continue;
                }
                if used >= budget {
                    break 'outer;
                }
                let mut candidate = state.incumbent().to_vec();
                candidate[dim] = probed;
                let (total, payload) = eval(&candidate);
                used += 1;
                let accepted = state.consider(&candidate, total);
                if accepted {
                    best_payload = payload.clone();
                    any_accept = true;
                }
                on_probe(&candidate, &payload, total, accepted);
            }
        }
        if !any_accept && !state.shrink() {
            converged = true;
            break;
        }
    }

    let total = state.incumbent_total();
    (state.incumbent, total, best_payload, converged)
}

/// Cached energy terms for one realized selection. The terms do not depend
/// on the weights, so one entry serves every `(alpha, beta)` cell.
#[derive(Debug, Clone, Copy)]
struct CachedTerms {
    robustness: f64,
    fidelity: f64,
    sparsity: usize,
    evaluations: u64,
    empty: bool,
}

impl CachedTerms {
    fn report(&self, weights: EnergyWeights) -> EnergyReport {
        if self.empty {
            return EnergyReport {
                robustness_term: 0.0,
                fidelity_term: 0.0,
                sparsity_term: 0,
                total: ENERGY_SENTINEL,
                weights,
                db_size: 0,
                evaluations: 0,
                empty_reference: true,
            };
        }
        EnergyReport {
            robustness_term: self.robustness,
            fidelity_term: self.fidelity,
            sparsity_term: self.sparsity,
            total: self.robustness
                + weights.alpha * self.fidelity
                + weights.beta * self.sparsity as f64,
            weights,
            db_size: self.sparsity,
            evaluations: self.evaluations,
            empty_reference: false,
        }
    }

    fn from_report(report: &EnergyReport) -> CachedTerms {
        CachedTerms {
            robustness: report.robustness_term,
            fidelity: report.fidelity_term,
            sparsity: report.sparsity_term,
            evaluations: report.evaluations,
            empty: report.empty_reference,
        }
    }
}

/// Cache-backed energy evaluator bound to one database and histogram.
///
/// Wraps [`crate::energy::evaluate`] with a count-keyed term cache and
/// supports priming from previously written traces so interrupted runs can
/// resume without repeating classifier work.
pub struct Minimizer<'a> {
    db: &'a PrototypeDatabase,
    hist: &'a RankHistogram,
    k: usize,
    pcfg: PerturbationConfig,
    cache: HashMap<Vec<u32>, CachedTerms>,
}

impl<'a> Minimizer<'a> {
    pub fn new(
        db: &'a PrototypeDatabase,
        hist: &'a RankHistogram,
        k: usize,
        pcfg: &PerturbationConfig,
    ) -> Result<Minimizer<'a>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        // Fail early on unresolvable perturbation subsets.
        pcfg.resolve(db.dimension())?;
        Ok(Minimizer {
            db,
            hist,
            k,
            pcfg: *pcfg,
            cache: HashMap::new(),
        })
    }

    /// Retained counts per (class, bin): the cache key and the quantity the
    /// energy actually depends on.
    fn count_key(&self, fractions: &[f64]) -> Vec<u32> {
        let plan = SparsificationPlan::new(fractions.to_vec()).expect("validated fractions");
        let mut key = Vec::with_capacity(self.hist.class_codes().len() * self.hist.num_bins());
        for class_idx in 0..self.hist.class_codes().len() {
            for bin in 0..self.hist.num_bins() {
                let size = self.hist.members_of(class_idx, bin).len();
                key.push(plan.retained_count(bin, size) as u32);
            }
        }
        key
    }

    /// Evaluates the functional for `fractions` under `weights`, consulting
    /// the term cache first.
    pub fn energy(&mut self, fractions: &[f64], weights: EnergyWeights) -> Result<EnergyReport> {
        let key = self.count_key(fractions);
        if let Some(terms) = self.cache.get(&key) {
            return Ok(terms.report(weights));
        }
        let plan = SparsificationPlan::new(fractions.to_vec())?;
        let report = evaluate(self.db, self.hist, &plan, weights, self.k, &self.pcfg)?;
        self.cache.insert(key, CachedTerms::from_report(&report));
        Ok(report)
    }

    /// Number of distinct selections evaluated or primed so far.
    pub fn cached_evaluations(&self) -> usize {
        self.cache.len()
    }

    /// Seeds the cache from records parsed out of a trace file.
    pub fn prime(&mut self, records: &[ParsedTraceRecord]) {
        for r in records {
            if r.plan.len() != self.hist.num_bins() {
                continue;
            }
            if r.plan.iter().any(|f| !(0.0..=1.0).contains(f)) {
                continue;
            }
            let key = self.count_key(&r.plan);
            self.cache.entry(key).or_insert(CachedTerms {
                robustness: r.robustness,
                fidelity: r.fidelity,
                sparsity: r.sparsity,
                evaluations: r.evaluations,
                empty: r.empty,
            });
        }
    }

    /// Deterministic seed candidates for the initial sweep.
    ///
    /// Up to three bins the whole tenth-step lattice is enumerated, ordered
    /// sparse plans first (optima of this functional concentrate there, and
    /// a truncated sweep should spend its budget on them). Larger plans get
    /// the structured profiles sparsity pressure tends to favor (scaled
    /// single-bin and uniform-sliver plans) plus seeded random points. The
    /// configured initial plan always comes first.
    fn seed_candidates(&self, initial: &[f64], cfg: &OptimizerConfig) -> Vec<Vec<f64>> {
        let n = initial.len();
        let mut seeds: Vec<Vec<f64>> = vec![initial.to_vec()];
        if n <= 3 {
            let mut lattice: Vec<Vec<f64>> = Vec::new();
            let mut idx = vec![0usize; n];
            loop {
                lattice.push(idx.iter().map(|&i| i as f64 / 10.0).collect());
                let mut d = 0;
                loop {
                    idx[d] += 1;
                    if idx[d] <= 10 {
                        break;
                    }
                    idx[d] = 0;
                    d += 1;
                    if d == n {
                        break;
                    }
                }
                if d == n {
                    break;
                }
            }
            lattice.sort_by(|a, b| {
                let sa: f64 = a.iter().sum();
                let sb: f64 = b.iter().sum();
                sa.total_cmp(&sb).then_with(|| a.partial_cmp(b).unwrap())
            });
            seeds.extend(lattice);
        } else {
            seeds.push(vec![1.0; n]);
            for scale in [1.0, 0.1] {
                for bin in 0..n {
                    let mut s = vec![0.0; n];
                    s[bin] = scale;
                    seeds.push(s);
                }
            }
            seeds.push(vec![0.1; n]);
            seeds.push(vec![0.02; n]);
            seeds.push(vec![0.5; n]);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.restarts {
            seeds.push((0..n).map(|_| rng.random::<f64>()).collect());
        }
        let mut seen: std::collections::HashSet<Vec<u64>> = std::collections::HashSet::new();
        seeds.retain(|s| seen.insert(s.iter().map(|f| f.to_bits()).collect()));
        seeds
    }

    /// Runs the multi-start compass search for one weight setting.
    pub fn minimize(
        &mut self,
        weights: EnergyWeights,
        cfg: &OptimizerConfig,
    ) -> Result<(SparsificationPlan, OptimizationTrace)> {
        let n = self.hist.num_bins();
        if cfg.max_evaluations < n + 1 {
            return Err(Error::InvalidArgument(format!(
                "budget {} is below the minimum {} (bins + 1)",
                cfg.max_evaluations,
                n + 1
            )));
        }
        if !(cfg.initial_step > 0.0 && cfg.initial_step <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "initial step {} outside (0, 1]",
                cfg.initial_step
            )));
        }
        if !(cfg.min_step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "minimum step {} must be positive",
                cfg.min_step
            )));
        }
        let initial = match &cfg.initial_plan {
            Some(p) => {
                let plan = SparsificationPlan::new(p.clone())?;
                if plan.num_bins() != n {
                    return Err(Error::InvalidArgument(format!(
                        "initial plan has {} fractions for {} bins",
                        plan.num_bins(),
                        n
                    )));
                }
                p.clone()
            }
            None => vec![1.0; n],
        };

        let seeds = self.seed_candidates(&initial, cfg);
        let mut records: Vec<TraceRecord> = Vec::new();
        let mut eval_err: Option<Error> = None;
        let mut best: Option<(Vec<f64>, EnergyReport)> = None;
        let mut converged = true;

        // Phase 1 (trace start 0): sweep the seed candidates, leaving at
        // least a third of the budget for the walks. The accepted flag
        // tracks the running minimum, so the segment's incumbent sequence
        // is non-increasing like any other start.
        let sweep_cap = (cfg.max_evaluations * 2).div_ceil(3);
        let mut seed_results: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut sweep_best = f64::INFINITY;
        for seed in seeds {
            if records.len() >= sweep_cap {
                break;
            }
            let report = self.energy(&seed, weights)?;
            let total = report.total;
            let accepted = total < sweep_best;
            if accepted {
                sweep_best = total;
            }
            let improves = best.as_ref().map_or(true, |(_, b)| total < b.total);
            if improves {
                best = Some((seed.clone(), report.clone()));
            }
            records.push(TraceRecord {
                plan: seed.clone(),
                report,
                accepted,
                start: 0,
            });
            seed_results.push((seed, total));
        }

        // Phase 2: compass walks from the initial plan and the best few
        // distinct seeds.
        let walk_starts = self.pick_walk_starts(&initial, &seed_results);
        for (walk_idx, start) in walk_starts.into_iter().enumerate() {
            let remaining = cfg.max_evaluations - records.len();
            if remaining == 0 {
                converged = false;
                break;
            }
            let (local_plan, local_total, local_report, local_converged) = compass_search(
                start,
                cfg.initial_step,
                cfg.min_step,
                remaining,
                |fracs| match self.energy(fracs, weights) {
                    Ok(report) => {
                        let total = report.total;
                        (total, report)
                    }
                    Err(e) => {
                        // Inputs were validated up front; remember the error
                        // and poison the search with sentinels.
                        if eval_err.is_none() {
                            eval_err = Some(e);
                        }
                        let rep = EnergyReport {
                            robustness_term: 0.0,
                            fidelity_term: 0.0,
                            sparsity_term: 0,
                            total: ENERGY_SENTINEL,
                            weights,
                            db_size: 0,
                            evaluations: 0,
                            empty_reference: true,
                        };
                        (ENERGY_SENTINEL, rep)
                    }
                },
                |plan, report, _total, accepted| {
                    records.push(TraceRecord {
                        plan: plan.to_vec(),
                        report: report.clone(),
                        accepted,
                        start: walk_idx as u32 + 1,
                    });
                },
            );
            if let Some(e) = eval_err {
                return Err(e);
            }
            let improves = best.as_ref().map_or(true, |(_, b)| local_total < b.total);
            if improves {
                best = Some((local_plan, local_report));
            }
            if !local_converged {
                converged = false;
                break;
            }
        }

        let (best_plan, best_report) = best.expect("at least one evaluation ran");
        let trace = OptimizationTrace {
            records,
            best_plan: best_plan.clone(),
            best_report,
            seed: cfg.seed,
            converged,
        };
        Ok((SparsificationPlan::new(best_plan)?, trace))
    }

    /// Walk starts: the initial plan plus the best sweep seeds with
    /// distinct realized selections (sentinels excluded).
    fn pick_walk_starts(
        &self,
        initial: &[f64],
        seed_results: &[(Vec<f64>, f64)],
    ) -> Vec<Vec<f64>> {
        const EXTRA_WALKS: usize = 4;
        let mut order: Vec<usize> = (0..seed_results.len()).collect();
        order.sort_by(|&a, &b| {
            seed_results[a]
                .1
                .total_cmp(&seed_results[b].1)
                .then(a.cmp(&b))
        });
        let mut starts = vec![initial.to_vec()];
        let mut keys: std::collections::HashSet<Vec<u32>> =
            std::collections::HashSet::new();
        keys.insert(self.count_key(initial));
        for &i in &order {
            if starts.len() > EXTRA_WALKS {
                break;
            }
            let (seed, total) = &seed_results[i];
            if *total == ENERGY_SENTINEL {
                continue;
            }
            if keys.insert(self.count_key(seed)) {
                starts.push(seed.clone());
            }
        }
        starts
    }
}

/// Minimizes the functional over retention fractions for fixed weights.
pub fn minimize_inner(
    db: &PrototypeDatabase,
    hist: &RankHistogram,
    weights: EnergyWeights,
    k: usize,
    pcfg: &PerturbationConfig,
    cfg: &OptimizerConfig,
) -> Result<(SparsificationPlan, OptimizationTrace)> {
    Minimizer::new(db, hist, k, pcfg)?.minimize(weights, cfg)
}

/// Objective used by the outer loop to score a candidate weight setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMetric {
    /// Binary ROC AUC over positive-class vote shares.
    Auc,
    /// Mean per-class recall; the multi-class objective.
    MacroAccuracy,
}

impl ValidationMetric {
    pub fn name(self) -> &'static str {
        match self {
            ValidationMetric::Auc => "auc",
            ValidationMetric::MacroAccuracy => "macro-accuracy",
        }
    }

    pub fn from_name(name: &str) -> Result<ValidationMetric> {
        match name {
            "auc" => Ok(ValidationMetric::Auc),
            "macro-accuracy" | "macro_accuracy" => Ok(ValidationMetric::MacroAccuracy),
            other => Err(Error::Config(format!("unknown validation metric {other:?}"))),
        }
    }
}

/// Outer-loop search settings.
#[derive(Debug, Clone)]
pub struct OuterConfig {
    /// Positive interval searched in log space.
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub metric: ValidationMetric,
    /// Maximum number of inner runs across the initial grid and refinement.
    pub budget: usize,
}

/// One evaluated weight setting.
#[derive(Debug, Clone)]
pub struct OuterCell {
    pub alpha: f64,
    pub beta: f64,
    pub plan: Vec<f64>,
    pub report: EnergyReport,
    /// Validation score; `None` when the plan's reference set was unusable.
    pub metric: Option<f64>,
    pub db_size: usize,
}

/// Result of the two-level optimization.
#[derive(Debug, Clone)]
pub struct OuterResult {
    pub alpha: f64,
    pub beta: f64,
    pub plan: SparsificationPlan,
    pub report: EnergyReport,
    pub trace: OptimizationTrace,
    pub validation_metric: f64,
    pub cells: Vec<OuterCell>,
}

const OUTER_GRID: usize = 3;

fn log_grid(range: (f64, f64), points: usize) -> Result<Vec<f64>> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
        return Err(Error::Config(format!(
            "range ({lo}, {hi}) must satisfy 0 < lo <= hi and be finite"
        )));
    }
    if lo == hi || points == 1 {
        return Ok(vec![lo]);
    }
    let ratio = hi / lo;
    Ok((0..points)
        .map(|i| lo * ratio.powf(i as f64 / (points - 1) as f64))
        .collect())
}

/// Tunes `(alpha, beta)` on a log grid (refined once around the best cell)
/// to maximize the validation metric of the classifier backed by each
/// cell's optimized selection. Ties go to the smaller resulting database.
pub fn optimize_outer(
    db_train: &PrototypeDatabase,
    db_validate: &PrototypeDatabase,
    hist: &RankHistogram,
    k: usize,
    pcfg: &PerturbationConfig,
    outer: &OuterConfig,
    inner: &OptimizerConfig,
) -> Result<OuterResult> {
    optimize_outer_primed(db_train, db_validate, hist, k, pcfg, outer, inner, &[])
}

/// [`optimize_outer`] with the evaluation cache primed from trace records,
/// so resumed runs skip classifier work already done.
#[allow(clippy::too_many_arguments)]
pub fn optimize_outer_primed(
    db_train: &PrototypeDatabase,
    db_validate: &PrototypeDatabase,
    hist: &RankHistogram,
    k: usize,
    pcfg: &PerturbationConfig,
    outer: &OuterConfig,
    inner: &OptimizerConfig,
    primed: &[ParsedTraceRecord],
) -> Result<OuterResult> {
    if db_validate.dimension() != db_train.dimension() {
        return Err(Error::Config(format!(
            "validation dimension {} does not match training dimension {}",
            db_validate.dimension(),
            db_train.dimension()
        )));
    }
    if outer.budget == 0 {
        return Err(Error::Config("outer budget must be at least 1".into()));
    }
    if outer.metric == ValidationMetric::Auc {
        if db_validate.class_registry().len() != 2 {
            return Err(Error::Config(format!(
                "AUC needs a binary validation set; found {} classes",
                db_validate.class_registry().len()
            )));
        }
        if db_train.class_registry() != db_validate.class_registry() {
            return Err(Error::Config(
                "AUC needs training and validation sets over the same two classes".into(),
            ));
        }
    }

    let alphas = log_grid(outer.alpha_range, OUTER_GRID)?;
    let betas = log_grid(outer.beta_range, OUTER_GRID)?;

    let mut minimizer = Minimizer::new(db_train, hist, k, pcfg)?;
    minimizer.prime(primed);
    let mut cells: Vec<OuterCell> = Vec::new();
    let mut traces: Vec<OptimizationTrace> = Vec::new();
    let mut seen: std::collections::HashSet<(u64, u64)> = std::collections::HashSet::new();
    let mut runs = 0usize;

    let run_cell = |minimizer: &mut Minimizer<'_>,
                        cells: &mut Vec<OuterCell>,
                        traces: &mut Vec<OptimizationTrace>,
                        runs: &mut usize,
                        seen: &mut std::collections::HashSet<(u64, u64)>,
                        alpha: f64,
                        beta: f64|
     -> Result<()> {
        if *runs >= outer.budget || !seen.insert((alpha.to_bits(), beta.to_bits())) {
            return Ok(());
        }
        *runs += 1;
        let weights = EnergyWeights::new(alpha, beta)?;
        let (plan, trace) = minimizer.minimize(weights, inner)?;
        let selection = sparsify(db_train, hist, &plan)?;
        let metric = if selection.is_empty() {
            None
        } else {
            let report = evaluate_classifier(&selection, db_validate, k)?;
            Some(match outer.metric {
                ValidationMetric::Auc => report.auc.ok_or_else(|| {
                    Error::Config("AUC undefined on this validation set".into())
                })?,
                ValidationMetric::MacroAccuracy => report.macro_recall,
            })
        };
        cells.push(OuterCell {
            alpha,
            beta,
            plan: plan.fractions().to_vec(),
            report: trace.best_report.clone(),
            metric,
            db_size: selection.len(),
        });
        traces.push(trace);
        Ok(())
    };

    for &alpha in &alphas {
        for &beta in &betas {
            run_cell(
                &mut minimizer,
                &mut cells,
                &mut traces,
                &mut runs,
                &mut seen,
                alpha,
                beta,
            )?;
        }
    }

    let best_idx = pick_best(&cells).ok_or_else(|| {
        Error::Config("no outer cell produced a usable reference set".into())
    })?;

    // One refinement pass: half-spacing neighbors around the best cell.
    let alpha_ratio = if alphas.len() > 1 {
        (alphas[1] / alphas[0]).sqrt()
    } else {
        1.0
    };
    let beta_ratio = if betas.len() > 1 {
        (betas[1] / betas[0]).sqrt()
    } else {
        1.0
    };
    if alpha_ratio != 1.0 || beta_ratio != 1.0 {
        let (a0, b0) = (cells[best_idx].alpha, cells[best_idx].beta);
        let clamp_a = |v: f64| v.clamp(outer.alpha_range.0, outer.alpha_range.1);
        let clamp_b = |v: f64| v.clamp(outer.beta_range.0, outer.beta_range.1);
        for da in [-1.0f64, 0.0, 1.0] {
            for db_ in [-1.0f64, 0.0, 1.0] {
                let alpha = clamp_a(a0 * alpha_ratio.powf(da));
                let beta = clamp_b(b0 * beta_ratio.powf(db_));
                run_cell(
                    &mut minimizer,
                    &mut cells,
                    &mut traces,
                    &mut runs,
                    &mut seen,
                    alpha,
                    beta,
                )?;
            }
        }
    }

    let best_idx = pick_best(&cells).expect("a usable cell existed before refinement");
    let best = &cells[best_idx];
    Ok(OuterResult {
        alpha: best.alpha,
        beta: best.beta,
        plan: SparsificationPlan::new(best.plan.clone())?,
        report: best.report.clone(),
        trace: traces[best_idx].clone(),
        validation_metric: best.metric.expect("best cell has a metric"),
        cells,
    })
}

/// Best cell: highest metric, ties to the smaller database, then to the
/// earlier cell. Cells without a usable reference set never win.
pub(crate) fn pick_best(cells: &[OuterCell]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, cell) in cells.iter().enumerate() {
        let Some(m) = cell.metric else { continue };
        match best {
            None => best = Some(i),
            Some(b) => {
                let bm = cells[b].metric.expect("best has metric");
                if m > bm || (m == bm && cell.db_size < cells[b].db_size) {
                    best = Some(i);
                }
            }
        }
    }
    best
}

/// Parsed line of a trace file; enough to reconstruct cached terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTraceRecord {
    pub plan: Vec<f64>,
    pub robustness: f64,
    pub fidelity: f64,
    pub sparsity: usize,
    pub evaluations: u64,
    pub empty: bool,
    pub accepted: bool,
    pub total: f64,
    pub start: u32,
}

/// Writes one inner run in the line-per-evaluation trace format.
pub fn write_trace<W: Write>(writer: &mut W, trace: &OptimizationTrace) -> Result<()> {
    writeln!(writer, "# seed={}", trace.seed)?;
    writeln!(
        writer,
        "# weights alpha={} beta={}",
        trace.best_report.weights.alpha, trace.best_report.weights.beta
    )?;
    for (i, r) in trace.records.iter().enumerate() {
        writeln!(
            writer,
            "eval={} start={} accepted={} total={} rob={} fid={} spa={} calls={} empty={} plan={}",
            i + 1,
            r.start,
            r.accepted,
            r.report.total,
            r.report.robustness_term,
            r.report.fidelity_term,
            r.report.sparsity_term,
            r.report.evaluations,
            r.report.empty_reference,
            join_fractions(&r.plan),
        )?;
    }
    writeln!(
        writer,
        "# best total={} plan={} converged={}",
        trace.best_report.total,
        join_fractions(&trace.best_plan),
        trace.converged
    )?;
    Ok(())
}

pub fn join_fractions(fracs: &[f64]) -> String {
    let parts: Vec<String> = fracs.iter().map(|f| format!("{f}")).collect();
    parts.join(",")
}

/// Reads every evaluation record out of a trace file, ignoring comments.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<ParsedTraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut plan = None;
        let mut rob = None;
        let mut fid = None;
        let mut spa = None;
        let mut calls = None;
        let mut empty = None;
        let mut accepted = None;
        let mut total = None;
        let mut start = 0u32;
        for field in line.split_whitespace() {
            let Some((key, value)) = field.split_once('=') else {
                continue;
            };
            match key {
                "plan" => {
                    let fracs: std::result::Result<Vec<f64>, _> =
                        value.split(',').map(str::parse).collect();
                    plan = Some(fracs.map_err(|_| bad_trace_line(i))?);
                }
                "rob" => rob = Some(value.parse().map_err(|_| bad_trace_line(i))?),
                "fid" => fid = Some(value.parse().map_err(|_| bad_trace_line(i))?),
                "spa" => spa = Some(value.parse().map_err(|_| bad_trace_line(i))?),
                "calls" => calls = Some(value.parse().map_err(|_| bad_trace_line(i))?),
                "empty" => empty = Some(value.parse().map_err(|_| bad_trace_line(i))?),
                "accepted" => accepted = Some(value.parse().map_err(|_| bad_trace_line(i))?),
                "total" => total = Some(value.parse().map_err(|_| bad_trace_line(i))?),
                "start" => start = value.parse().map_err(|_| bad_trace_line(i))?,
                _ => {}
            }
        }
        match (plan, rob, fid, spa, calls, empty, accepted, total) {
            (
                Some(plan),
                Some(robustness),
                Some(fidelity),
                Some(sparsity),
                Some(evaluations),
                Some(empty),
                Some(accepted),
                Some(total),
            ) => out.push(ParsedTraceRecord {
                plan,
                robustness,
                fidelity,
                sparsity,
                evaluations,
                empty,
                accepted,
                total,
                start,
            }),
            _ => return Err(bad_trace_line(i)),
        }
    }
    Ok(out)
}

fn bad_trace_line(index: usize) -> Error {
    Error::Format {
        line: index + 1,
        message: "unparseable trace record".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consider_rejects_equal_totals() {
        let mut s = SearchState::new(vec![0.5], 10.0, 0.25, 1e-3);
        assert!(!s.consider(&[0.75], 10.0));
        assert_eq!(s.incumbent(), &[0.5]);
    }

    #[test]
    fn consider_rejects_sentinel() {
        let mut s = SearchState::new(vec![0.5], 10.0, 0.25, 1e-3);
        assert!(!s.consider(&[0.75], ENERGY_SENTINEL));
    }

    #[test]
    fn consider_accepts_strict_improvement_and_expands() {
        let mut s = SearchState::new(vec![0.5], 10.0, 0.25, 1e-3);
        assert!(s.consider(&[0.75], 9.0));
        assert_eq!(s.incumbent(), &[0.75]);
        assert_eq!(s.step(), 0.5);
    }

    #[test]
    fn shrink_signals_convergence() {
        let mut s = SearchState::new(vec![0.5], 10.0, 2e-3, 1e-3);
        assert!(s.shrink()); // 1e-3, still >= min
        assert!(!s.shrink()); // 5e-4 < min
    }

    #[test]
    fn compass_converges_on_quadratic_surrogate() {
        // Minimum at 0.3; compass must land within min_step of it.
        let target = 0.3;
        let (best, total, _, converged) = compass_search(
            vec![1.0],
            0.25,
            1e-4,
            10_000,
            |x| ((x[0] - target) * (x[0] - target), ()),
            |_, _, _, _| {},
        );
        assert!(converged);
        assert!((best[0] - target).abs() <= 1e-3, "best={}", best[0]);
        assert!(total < 1e-6);
    }

    #[test]
    fn compass_respects_bounds_and_budget() {
        let mut probes = Vec::new();
        let (_, _, _, _) = compass_search(
            vec![0.5, 0.5],
            0.5,
            1e-6,
            17,
            |x| (x.iter().sum::<f64>(), ()),
            |plan, _, _, _| probes.push(plan.to_vec()),
        );
        assert!(probes.len() <= 17);
        for p in &probes {
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn compass_incumbent_totals_never_increase() {
        let mut totals = Vec::new();
        compass_search(
            vec![1.0, 1.0],
            0.25,
            1e-4,
            500,
            |x| {
                let v = (x[0] - 0.2).powi(2) + (x[1] - 0.7).powi(2);
                (v, ())
            },
            |_, _, total, accepted| {
                if accepted {
                    totals.push(total);
                }
            },
        );
        for w in totals.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn alternating_surrogate_reaches_minimum_within_min_step() {
        // A 1D piecewise-quadratic with a small bump that forces both
        // accepted and rejected probes along the way.
        let f = |x: f64| {
            let base = (x - 0.45) * (x - 0.45);
            if (0.6..0.7).contains(&x) {
                base + 0.001
            } else {
                base
            }
        };
        let (best, _, _, converged) = compass_search(
            vec![1.0],
            0.25,
            1e-5,
            10_000,
            |x| (f(x[0]), ()),
            |_, _, _, _| {},
        );
        assert!(converged);
        assert!((best[0] - 0.45).abs() <= 1e-4);
    }

    #[test]
    fn log_grid_shapes() {
        let g = log_grid((0.01, 1.0), 3).unwrap();
        assert_eq!(g.len(), 3);
        assert!((g[0] - 0.01).abs() < 1e-12);
        assert!((g[1] - 0.1).abs() < 1e-12);
        assert!((g[2] - 1.0).abs() < 1e-12);
        assert_eq!(log_grid((0.5, 0.5), 3).unwrap(), vec![0.5]);
        assert!(log_grid((0.0, 1.0), 3).is_err());
        assert!(log_grid((2.0, 1.0), 3).is_err());
    }

    #[test]
    fn pick_best_prefers_metric_then_smaller_database() {
        let cell = |metric: Option<f64>, db_size: usize| OuterCell {
            alpha: 1.0,
            beta: 1.0,
            plan: vec![1.0],
            report: EnergyReport {
                robustness_term: 0.0,
                fidelity_term: 0.0,
                sparsity_term: db_size,
                total: 0.0,
                weights: EnergyWeights::new(1.0, 1.0).unwrap(),
                db_size,
                evaluations: 0,
                empty_reference: false,
            },
            metric,
            db_size,
        };
        // The empty-reference cell (metric None) can never win.
        let cells = vec![cell(None, 0), cell(Some(0.9), 100), cell(Some(0.9), 40)];
        assert_eq!(pick_best(&cells), Some(2));
        let cells = vec![cell(Some(0.95), 500), cell(Some(0.9), 4)];
        assert_eq!(pick_best(&cells), Some(0));
        assert_eq!(pick_best(&[cell(None, 0)]), None);
    }

    #[test]
    fn trace_round_trip() {
        let weights = EnergyWeights::new(0.5, 0.25).unwrap();
        let report = EnergyReport {
            robustness_term: 1.5,
            fidelity_term: 2.25,
            sparsity_term: 7,
            total: 1.5 + 0.5 * 2.25 + 0.25 * 7.0,
            weights,
            db_size: 7,
            evaluations: 99,
            empty_reference: false,
        };
        let trace = OptimizationTrace {
            records: vec![
                TraceRecord {
                    plan: vec![1.0, 0.625],
                    report: report.clone(),
                    accepted: true,
                    start: 0,
                },
                TraceRecord {
                    plan: vec![0.75, 0.625],
                    report: report.clone(),
                    accepted: false,
                    start: 1,
                },
            ],
            best_plan: vec![1.0, 0.625],
            best_report: report,
            seed: 3,
            converged: true,
        };
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        let parsed = read_trace(buf.as_slice()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].plan, vec![1.0, 0.625]);
        assert_eq!(parsed[0].robustness, 1.5);
        assert_eq!(parsed[0].sparsity, 7);
        assert!(parsed[0].accepted);
        assert_eq!(parsed[0].start, 0);
        assert!(!parsed[1].accepted);
        assert_eq!(parsed[1].start, 1);
    }
}
