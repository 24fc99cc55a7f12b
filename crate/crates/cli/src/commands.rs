//! Subcommand implementations. Every command is a pure function of
//! (config, seed): rerunning with the same inputs produces byte-identical
//! artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use protoselect::{
    build_histogram, evaluate_classifier, gen_blobs, gen_rays, rank_all, read_trace,
    reduction_report, sparsify, split, write_rank_csv, write_trace, DatabaseSplit, EnergyReport,
    Error, Metric, MetricReport, Minimizer, OptimizationTrace, PrototypeDatabase, RankHistogram,
    RankScore, ReductionReport, Result, SparsificationPlan, SparsifiedDatabase,
};

use crate::config::{OptimizeMode, RunConfig};

pub struct ResolvedData {
    pub train: PrototypeDatabase,
    pub validate: Option<PrototypeDatabase>,
    pub test: Option<PrototypeDatabase>,
}

/// Materializes the configured data source and applies the configured split.
pub fn resolve_data(cfg: &RunConfig) -> Result<ResolvedData> {
    let db = if let Some(path) = &cfg.input.csv {
        PrototypeDatabase::ingest_csv_path(path, Metric::Euclidean)?
    } else if let Some(path) = &cfg.input.db {
        PrototypeDatabase::load_path(path)?
    } else if let Some(spec) = cfg.ray_spec() {
        gen_rays(&spec)?
    } else if let Some(spec) = cfg.blob_spec() {
        gen_blobs(&spec)?
    } else {
        return Err(Error::Config("no input source configured".into()));
    };
    let fractions = cfg.split_fractions()?;
    let DatabaseSplit {
        train,
        validate,
        test,
    } = split(&db, &fractions, cfg.split_seed())?;
    Ok(ResolvedData {
        train,
        validate,
        test,
    })
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write_run_manifest(cfg: &RunConfig, command: &str, artifacts: &[&str]) -> Result<()> {
    let mut w = BufWriter::new(File::create(out_path(cfg, "run.txt"))?);
    writeln!(w, "command {command}")?;
    writeln!(w, "seed {}", cfg.seed)?;
    writeln!(w, "k {}", cfg.k)?;
    writeln!(w, "bins {}", cfg.bins)?;
    writeln!(w, "epsilon {}", cfg.epsilon)?;
    writeln!(w, "perturb_dims {}", cfg.perturb_dims)?;
    for a in artifacts {
        writeln!(w, "artifact {a}")?;
    }
    w.flush()?;
    Ok(())
}

/// `gen`: writes the configured synthetic dataset splits as CSV files.
pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    if cfg.ray_spec().is_none() && cfg.blob_spec().is_none() {
        return Err(Error::Config(
            "gen needs a generator input ([input.rays] or [input.blobs])".into(),
        ));
    }
    ensure_out_dir(cfg)?;
    let data = resolve_data(cfg)?;
    let mut artifacts = vec!["train.csv"];
    data.train
        .write_csv(File::create(out_path(cfg, "train.csv"))?, None)?;
    if let Some(v) = &data.validate {
        v.write_csv(File::create(out_path(cfg, "validate.csv"))?, None)?;
        artifacts.push("validate.csv");
    }
    if let Some(t) = &data.test {
        t.write_csv(File::create(out_path(cfg, "test.csv"))?, None)?;
        artifacts.push("test.csv");
    }
    write_run_manifest(cfg, "gen", &artifacts)?;
    println!(
        "generated train={} validate={} test={} (dimension {})",
        data.train.len(),
        data.validate.as_ref().map_or(0, PrototypeDatabase::len),
        data.test.as_ref().map_or(0, PrototypeDatabase::len),
        data.train.dimension()
    );
    Ok(())
}

/// `ingest`: parses the configured CSV and stores the binary database.
pub fn cmd_ingest(cfg: &RunConfig, input: Option<&Path>, output: Option<&Path>) -> Result<()> {
    let path = match input.or(cfg.input.csv.as_deref()) {
        Some(p) => p,
        None => {
            return Err(Error::Config(
                "ingest needs a CSV input (config [input].csv or --input)".into(),
            ))
        }
    };
    let db = PrototypeDatabase::ingest_csv_path(path, Metric::Euclidean)?;
    ensure_out_dir(cfg)?;
    let out = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_path(cfg, "db.pdb"));
    db.save_path(&out)?;
    write_run_manifest(cfg, "ingest", &["db.pdb"])?;
    println!(
        "ingested {} prototypes (dimension {}, {} classes) -> {}",
        db.len(),
        db.dimension(),
        db.class_registry().len(),
        out.display()
    );
    Ok(())
}

fn ranked_histogram(
    cfg: &RunConfig,
    train: &PrototypeDatabase,
) -> Result<(Vec<RankScore>, RankHistogram)> {
    let scores = rank_all(train, cfg.k)?;
    let hist = build_histogram(train, &scores, cfg.bins)?;
    Ok((scores, hist))
}

fn write_histogram_txt(cfg: &RunConfig, hist: &RankHistogram) -> Result<()> {
    let mut w = BufWriter::new(File::create(out_path(cfg, "histogram.txt"))?);
    writeln!(w, "# seed={}", cfg.seed)?;
    writeln!(w, "bins {}", hist.num_bins())?;
    for (ci, &code) in hist.class_codes().iter().enumerate() {
        let edges: Vec<String> = hist.edges_of(ci).iter().map(|e| e.to_string()).collect();
        writeln!(
            w,
            "class {code} size {} edges {}",
            hist.class_size(ci),
            edges.join(",")
        )?;
        let sizes: Vec<String> = (0..hist.num_bins())
            .map(|b| hist.members_of(ci, b).len().to_string())
            .collect();
        writeln!(w, "class {code} bin_sizes {}", sizes.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// `rank`: rank export plus the per-class bin-edge table.
pub fn cmd_rank(cfg: &RunConfig) -> Result<()> {
    let data = resolve_data(cfg)?;
    let (scores, hist) = ranked_histogram(cfg, &data.train)?;
    ensure_out_dir(cfg)?;
    write_rank_csv(
        File::create(out_path(cfg, "ranks.csv"))?,
        &data.train,
        &scores,
        &hist,
    )?;
    write_histogram_txt(cfg, &hist)?;
    write_run_manifest(cfg, "rank", &["ranks.csv", "histogram.txt"])?;
    println!(
        "ranked {} prototypes into {} bins per class -> {}",
        data.train.len(),
        cfg.bins,
        cfg.out_dir.display()
    );
    Ok(())
}

/// Reads `fractions=...` from a plan file.
pub fn read_plan_file(path: &Path) -> Result<SparsificationPlan> {
    let text = std::fs::read_to_string(path)?;
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("fractions=") {
            let fracs: std::result::Result<Vec<f64>, _> =
                rest.split(',').map(str::trim).map(str::parse).collect();
            let fracs = fracs.map_err(|_| Error::Format {
                line: 1,
                message: format!("unparseable fractions in {}", path.display()),
            })?;
            return SparsificationPlan::new(fracs);
        }
    }
    Err(Error::Format {
        line: 1,
        message: format!("no `fractions=` line in {}", path.display()),
    })
}

fn resolve_plan(cfg: &RunConfig, plan_path: Option<&Path>) -> Result<SparsificationPlan> {
    if let Some(path) = plan_path {
        return read_plan_file(path);
    }
    if let Some(p) = &cfg.plan {
        return SparsificationPlan::new(p.fractions.clone());
    }
    // Fall back to a plan produced by a previous optimize run.
    let default = out_path(cfg, "plan.txt");
    if default.exists() {
        return read_plan_file(&default);
    }
    Err(Error::Config(
        "no plan: pass --plan, set [plan].fractions, or run optimize first".into(),
    ))
}

fn write_plan_txt(
    cfg: &RunConfig,
    plan: &SparsificationPlan,
    weights: Option<(f64, f64)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(out_path(cfg, "plan.txt"))?);
    writeln!(w, "# seed={}", cfg.seed)?;
    if let Some((a, b)) = weights {
        writeln!(w, "# alpha={a} beta={b}")?;
    }
    writeln!(
        w,
        "fractions={}",
        protoselect::optimizer::join_fractions(plan.fractions())
    )?;
    w.flush()?;
    Ok(())
}

fn write_reduction(w: &mut impl Write, report: &ReductionReport) -> Result<()> {
    for b in &report.bins {
        writeln!(
            w,
            "bin {} original {} retained {} percent {}",
            b.bin,
            b.original,
            b.retained,
            b.percent()
        )?;
    }
    writeln!(
        w,
        "total original {} retained {} retention_percent {} reduction_percent {}",
        report.total_original,
        report.total_retained,
        report.total_percent(),
        report.reduction_percent()
    )?;
    Ok(())
}

fn write_energy_txt(
    cfg: &RunConfig,
    report: &EnergyReport,
    reduction: &ReductionReport,
    trace: &OptimizationTrace,
    outer_summary: Option<(&str, f64, &[protoselect::OuterCell])>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(out_path(cfg, "energy.txt"))?);
    writeln!(w, "# seed={}", cfg.seed)?;
    writeln!(w, "alpha {}", report.weights.alpha)?;
    writeln!(w, "beta {}", report.weights.beta)?;
    writeln!(w, "robustness {}", report.robustness_term)?;
    writeln!(w, "fidelity {}", report.fidelity_term)?;
    writeln!(w, "sparsity {}", report.sparsity_term)?;
    writeln!(w, "total {}", report.total)?;
    writeln!(w, "db_size {}", report.db_size)?;
    writeln!(w, "evaluations {}", report.evaluations)?;
    writeln!(w, "empty_reference {}", report.empty_reference)?;
    writeln!(w, "converged {}", trace.converged)?;
    writeln!(w, "trace_records {}", trace.records.len())?;
    write_reduction(&mut w, reduction)?;
    if let Some((metric_name, value, cells)) = outer_summary {
        writeln!(w, "validation_metric {metric_name} {value}")?;
        for c in cells {
            writeln!(
                w,
                "cell alpha {} beta {} metric {} db_size {}",
                c.alpha,
                c.beta,
                c.metric.map_or_else(|| "-".into(), |m| m.to_string()),
                c.db_size
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `optimize`: fixed-weights inner run, or the full outer search.
pub fn cmd_optimize(cfg: &RunConfig, resume: bool) -> Result<()> {
    let mode = cfg.optimize_mode()?;
    let data = resolve_data(cfg)?;
    let (_, hist) = ranked_histogram(cfg, &data.train)?;
    let pcfg = cfg.perturbation()?;
    let inner = cfg.optimizer_config();
    ensure_out_dir(cfg)?;

    let primed = if resume {
        let trace_path = out_path(cfg, "trace.log");
        if trace_path.exists() {
            read_trace(BufReader::new(File::open(&trace_path)?))?
        } else {
            Vec::new()
        }
    } else {
        Vec::new()
    };

    match mode {
        OptimizeMode::Fixed(weights) => {
            let mut minimizer = Minimizer::new(&data.train, &hist, cfg.k, &pcfg)?;
            minimizer.prime(&primed);
            let (plan, trace) = minimizer.minimize(weights, &inner)?;
            let selection = sparsify(&data.train, &hist, &plan)?;
            let reduction = reduction_report(&selection);
            let mut trace_file = BufWriter::new(File::create(out_path(cfg, "trace.log"))?);
            write_trace(&mut trace_file, &trace)?;
            trace_file.flush()?;
            write_plan_txt(cfg, &plan, Some((weights.alpha, weights.beta)))?;
            write_energy_txt(cfg, &trace.best_report, &reduction, &trace, None)?;
            write_run_manifest(cfg, "optimize", &["plan.txt", "trace.log", "energy.txt"])?;
            println!(
                "optimized: total={} db_size={} ({}% reduction) plan={}",
                trace.best_report.total,
                trace.best_report.db_size,
                reduction.reduction_percent(),
                protoselect::optimizer::join_fractions(plan.fractions()),
            );
            Ok(())
        }
        OptimizeMode::Outer(outer) => {
            let validate = data.validate.as_ref().ok_or_else(|| {
                Error::Config("outer optimization needs a validation split".into())
            })?;
            let result = protoselect::optimizer::optimize_outer_primed(
                &data.train,
                validate,
                &hist,
                cfg.k,
                &pcfg,
                &outer,
                &inner,
                &primed,
            )?;
            let selection = sparsify(&data.train, &hist, &result.plan)?;
            let reduction = reduction_report(&selection);
            let mut trace_file = BufWriter::new(File::create(out_path(cfg, "trace.log"))?);
            write_trace(&mut trace_file, &result.trace)?;
            trace_file.flush()?;
            write_plan_txt(cfg, &result.plan, Some((result.alpha, result.beta)))?;
            write_energy_txt(
                cfg,
                &result.report,
                &reduction,
                &result.trace,
                Some((outer.metric.name(), result.validation_metric, &result.cells)),
            )?;
            write_run_manifest(cfg, "optimize", &["plan.txt", "trace.log", "energy.txt"])?;
            println!(
                "optimized: alpha={} beta={} {}={} db_size={} ({}% reduction)",
                result.alpha,
                result.beta,
                outer.metric.name(),
                result.validation_metric,
                result.report.db_size,
                reduction.reduction_percent(),
            );
            Ok(())
        }
    }
}

/// `sparsify`: materializes a plan into a CSV export plus a report.
pub fn cmd_sparsify(cfg: &RunConfig, plan_path: Option<&Path>) -> Result<()> {
    let plan = resolve_plan(cfg, plan_path)?;
    let data = resolve_data(cfg)?;
    let (_, hist) = ranked_histogram(cfg, &data.train)?;
    let selection = sparsify(&data.train, &hist, &plan)?;
    let reduction = reduction_report(&selection);
    ensure_out_dir(cfg)?;
    selection.export_csv(File::create(out_path(cfg, "sparsified.csv"))?)?;
    let mut w = BufWriter::new(File::create(out_path(cfg, "reduction.txt"))?);
    writeln!(w, "# seed={}", cfg.seed)?;
    write_reduction(&mut w, &reduction)?;
    w.flush()?;
    write_run_manifest(cfg, "sparsify", &["sparsified.csv", "reduction.txt"])?;
    println!(
        "sparsified {} -> {} prototypes ({}% reduction)",
        data.train.len(),
        selection.len(),
        reduction.reduction_percent()
    );
    Ok(())
}

fn write_metrics_block(
    w: &mut impl Write,
    label: &str,
    report: &MetricReport,
) -> Result<()> {
    writeln!(w, "[{label}]")?;
    report.write_text(&mut *w)?;
    writeln!(w, "summary {}", report.summary_row())?;
    Ok(())
}

/// `evaluate`: test-set metrics for the full and sparsified databases.
pub fn cmd_evaluate(cfg: &RunConfig, plan_path: Option<&Path>) -> Result<()> {
    let plan = resolve_plan(cfg, plan_path)?;
    let data = resolve_data(cfg)?;
    let test = data
        .test
        .as_ref()
        .ok_or_else(|| Error::Config("evaluate needs a test split".into()))?;
    if test.dimension() != data.train.dimension() {
        return Err(Error::Config(format!(
            "test dimension {} does not match training dimension {}",
            test.dimension(),
            data.train.dimension()
        )));
    }
    let (_, hist) = ranked_histogram(cfg, &data.train)?;
    let selection = sparsify(&data.train, &hist, &plan)?;
    if selection.is_empty() {
        return Err(Error::EmptySearchSet);
    }
    let full = SparsifiedDatabase::full(&data.train);
    let full_report = evaluate_classifier(&full, test, cfg.k)?;
    let sparse_report = evaluate_classifier(&selection, test, cfg.k)?;
    ensure_out_dir(cfg)?;
    let mut w = BufWriter::new(File::create(out_path(cfg, "metrics.txt"))?);
    writeln!(w, "# seed={}", cfg.seed)?;
    write_metrics_block(&mut w, "full", &full_report)?;
    write_metrics_block(&mut w, "sparsified", &sparse_report)?;
    w.flush()?;
    write_run_manifest(cfg, "evaluate", &["metrics.txt"])?;
    println!(
        "evaluate: full accuracy={} sparsified accuracy={} (db {} -> {})",
        full_report.accuracy,
        sparse_report.accuracy,
        full_report.db_size,
        sparse_report.db_size
    );
    Ok(())
}

/// `report`: one human summary plus a machine-readable row, built from the
/// artifacts already in the output directory.
pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let energy_path = out_path(cfg, "energy.txt");
    let metrics_path = out_path(cfg, "metrics.txt");
    if !energy_path.exists() && !metrics_path.exists() {
        return Err(Error::Config(format!(
            "nothing to report in {}; run optimize and/or evaluate first",
            cfg.out_dir.display()
        )));
    }
    let mut fields: Vec<(String, String)> = vec![("seed".into(), cfg.seed.to_string())];
    if energy_path.exists() {
        let text = std::fs::read_to_string(&energy_path)?;
        for key in [
            "alpha",
            "beta",
            "total",
            "db_size",
            "validation_metric",
        ] {
            for line in text.lines() {
                if let Some(rest) = line.strip_prefix(&format!("{key} ")) {
                    fields.push((key.into(), rest.trim().replace(' ', "=")));
                }
            }
        }
        for line in text.lines() {
            if line.starts_with("total original") {
                if let Some(red) = line.split("reduction_percent ").nth(1) {
                    fields.push(("reduction_percent".into(), red.trim().to_string()));
                }
            }
        }
    }
    if metrics_path.exists() {
        let text = std::fs::read_to_string(&metrics_path)?;
        let mut block = String::new();
        for line in text.lines() {
            if line.starts_with('[') {
                block = line.trim_matches(['[', ']']).to_string();
            } else if let Some(rest) = line.strip_prefix("summary ") {
                fields.push((format!("{block}_summary"), rest.to_string()));
            }
        }
    }
    let mut w = BufWriter::new(File::create(out_path(cfg, "summary.txt"))?);
    for (k, v) in &fields {
        writeln!(w, "{k} {v}")?;
    }
    let row: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(w, "row {}", row.join(" "))?;
    w.flush()?;
    println!("row {}", row.join(" "));
    Ok(())
}
