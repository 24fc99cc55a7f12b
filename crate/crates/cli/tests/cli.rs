//! End-to-end tests of the `protoselect` binary: artifacts, exit codes,
//! and byte-identical reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protoselect"))
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_status(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Fixture {
    #[allow(dead_code)]
    tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Fixture {
    fn new() -> Fixture {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        Fixture { tmp, dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn path_str(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn toy_csv() -> &'static str {
    "id,class,f0,f1\n\
     0,0,0.0,0.0\n1,0,0.3,0.1\n2,1,5.0,5.0\n"
}

#[test]
fn rank_writes_exports_for_a_toy_file() {
    let fx = Fixture::new();
    write(&fx.path("toy.csv"), toy_csv());
    write(
        &fx.path("run.toml"),
        &format!(
            "seed = 1\nk = 2\nbins = 2\nout_dir = \"{}\"\n[input]\ncsv = \"{}\"\n",
            fx.path_str("out"),
            fx.path_str("toy.csv")
        ),
    );
    let out = run(&["--config", &fx.path_str("run.toml"), "rank"]);
    assert_status(&out, 0);
    let ranks = String::from_utf8(read_bytes(&fx.path("out/ranks.csv"))).unwrap();
    let mut lines = ranks.lines();
    assert_eq!(lines.next(), Some("id,class,score,bin"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let score: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=2.0).contains(&score));
    }
    assert!(fx.path("out/histogram.txt").exists());
}

#[test]
fn missing_input_path_exits_2_with_diagnostic() {
    let fx = Fixture::new();
    write(
        &fx.path("run.toml"),
        &format!(
            "out_dir = \"{}\"\n[input]\ncsv = \"{}\"\n",
            fx.path_str("out"),
            fx.path_str("nope.csv")
        ),
    );
    let out = run(&["--config", &fx.path_str("run.toml"), "rank"]);
    assert_status(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("does not exist"), "stderr: {stderr}");
}

#[test]
fn malformed_csv_exits_3() {
    let fx = Fixture::new();
    write(&fx.path("bad.csv"), "id,class,f0\n0,0,oops\n");
    write(
        &fx.path("run.toml"),
        &format!(
            "out_dir = \"{}\"\n[input]\ncsv = \"{}\"\n",
            fx.path_str("out"),
            fx.path_str("bad.csv")
        ),
    );
    let out = run(&["--config", &fx.path_str("run.toml"), "rank"]);
    assert_status(&out, 3);
}

#[test]
fn rank_reruns_are_byte_identical_across_thread_counts() {
    let fx = Fixture::new();
    write(&fx.path("toy.csv"), toy_csv());
    let config = |out: &str| {
        format!(
            "seed = 9\nk = 2\nbins = 2\nout_dir = \"{}\"\n[input]\ncsv = \"{}\"\n",
            fx.path_str(out),
            fx.path_str("toy.csv")
        )
    };
    write(&fx.path("a.toml"), &config("out_a"));
    write(&fx.path("b.toml"), &config("out_b"));
    assert_status(&run(&["--config", &fx.path_str("a.toml"), "rank"]), 0);
    assert_status(
        &run(&["--config", &fx.path_str("b.toml"), "--threads", "2", "rank"]),
        0,
    );
    assert_eq!(
        read_bytes(&fx.path("out_a/ranks.csv")),
        read_bytes(&fx.path("out_b/ranks.csv"))
    );
    assert_eq!(
        read_bytes(&fx.path("out_a/histogram.txt")),
        read_bytes(&fx.path("out_b/histogram.txt"))
    );
}

fn blob_config(fx: &Fixture, out: &str, tail: &str) -> String {
    format!(
        "seed = 4\nk = 3\nbins = 2\nout_dir = \"{}\"\n\
         [input.blobs]\ndimension = 2\nmeans = [[0.0, 0.0], [4.0, 0.0]]\nstds = [1.0, 1.0]\nper_class = 30\n\
         [split]\ntrain = 0.6\nvalidate = 0.2\ntest = 0.2\n{tail}",
        fx.path_str(out)
    )
}

#[test]
fn gen_writes_all_three_splits() {
    let fx = Fixture::new();
    write(&fx.path("run.toml"), &blob_config(&fx, "out", ""));
    let out = run(&["--config", &fx.path_str("run.toml"), "gen"]);
    assert_status(&out, 0);
    for (name, rows) in [("train.csv", 36), ("validate.csv", 12), ("test.csv", 12)] {
        let text = String::from_utf8(read_bytes(&fx.path(&format!("out/{name}")))).unwrap();
        assert_eq!(text.lines().count() - 1, rows, "{name}");
    }
}

#[test]
fn fixed_weights_optimize_writes_plan_trace_energy() {
    let fx = Fixture::new();
    let tail = "[weights]\nalpha = 1.0\nbeta = 0.05\n[optimizer]\nbudget = 120\n";
    write(&fx.path("run.toml"), &blob_config(&fx, "out", tail));
    let out = run(&["--config", &fx.path_str("run.toml"), "optimize"]);
    assert_status(&out, 0);
    let plan = String::from_utf8(read_bytes(&fx.path("out/plan.txt"))).unwrap();
    assert!(plan.lines().any(|l| l.starts_with("fractions=")));
    assert!(plan.contains("# seed=4"));
    let trace = String::from_utf8(read_bytes(&fx.path("out/trace.log"))).unwrap();
    assert!(trace.lines().filter(|l| l.starts_with("eval=")).count() >= 3);
    let energy = String::from_utf8(read_bytes(&fx.path("out/energy.txt"))).unwrap();
    assert!(energy.contains("total "));
    assert!(energy.contains("reduction_percent"));

    // Identical rerun, identical bytes.
    write(&fx.path("run2.toml"), &blob_config(&fx, "out2", tail));
    assert_status(&run(&["--config", &fx.path_str("run2.toml"), "optimize"]), 0);
    for name in ["plan.txt", "trace.log", "energy.txt"] {
        assert_eq!(
            read_bytes(&fx.path(&format!("out/{name}"))),
            read_bytes(&fx.path(&format!("out2/{name}"))),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn resume_reuses_the_trace_and_reproduces_it() {
    let fx = Fixture::new();
    let tail = "[weights]\nalpha = 1.0\nbeta = 0.05\n[optimizer]\nbudget = 100\n";
    write(&fx.path("run.toml"), &blob_config(&fx, "out", tail));
    assert_status(&run(&["--config", &fx.path_str("run.toml"), "optimize"]), 0);
    let first = read_bytes(&fx.path("out/trace.log"));
    let out = run(&["--config", &fx.path_str("run.toml"), "optimize", "--resume"]);
    assert_status(&out, 0);
    assert_eq!(first, read_bytes(&fx.path("out/trace.log")));
}

#[test]
fn outer_optimize_reports_weights_and_validation_metric() {
    let fx = Fixture::new();
    let tail = "[outer]\nalpha = [0.5, 2.0]\nbeta = [0.01, 0.1]\nmetric = \"auc\"\nbudget = 4\n\
                [optimizer]\nbudget = 80\n";
    write(&fx.path("run.toml"), &blob_config(&fx, "out", tail));
    let out = run(&["--config", &fx.path_str("run.toml"), "optimize"]);
    assert_status(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("alpha="), "stdout: {stdout}");
    let energy = String::from_utf8(read_bytes(&fx.path("out/energy.txt"))).unwrap();
    assert!(energy.contains("validation_metric auc"));
    assert!(energy.lines().filter(|l| l.starts_with("cell ")).count() >= 2);
}

#[test]
fn evaluate_identity_plan_gives_equal_columns() {
    let fx = Fixture::new();
    write(&fx.path("run.toml"), &blob_config(&fx, "out", "[plan]\nfractions = [1.0, 1.0]\n"));
    let out = run(&["--config", &fx.path_str("run.toml"), "evaluate"]);
    assert_status(&out, 0);
    let metrics = String::from_utf8(read_bytes(&fx.path("out/metrics.txt"))).unwrap();
    let grab = |block: &str, key: &str| -> String {
        let mut inside = false;
        for line in metrics.lines() {
            if line.starts_with('[') {
                inside = line == format!("[{block}]");
            } else if inside {
                if let Some(rest) = line.strip_prefix(key) {
                    return rest.trim().to_string();
                }
            }
        }
        panic!("{key} missing from {block}: {metrics}");
    };
    assert_eq!(grab("full", "accuracy "), grab("sparsified", "accuracy "));
    assert_eq!(grab("full", "auc "), grab("sparsified", "auc "));
    assert_eq!(grab("full", "db_size "), grab("sparsified", "db_size "));
}

#[test]
fn evaluate_empty_plan_refuses_with_empty_set_diagnostic() {
    let fx = Fixture::new();
    write(&fx.path("run.toml"), &blob_config(&fx, "out", "[plan]\nfractions = [0.0, 0.0]\n"));
    let out = run(&["--config", &fx.path_str("run.toml"), "evaluate"]);
    assert_status(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("empty"), "stderr: {stderr}");
}

#[test]
fn sparsify_exports_subset_and_reduction() {
    let fx = Fixture::new();
    write(&fx.path("run.toml"), &blob_config(&fx, "out", "[plan]\nfractions = [1.0, 0.5]\n"));
    let out = run(&["--config", &fx.path_str("run.toml"), "sparsify"]);
    assert_status(&out, 0);
    let csv = String::from_utf8(read_bytes(&fx.path("out/sparsified.csv"))).unwrap();
    assert!(csv.starts_with("id,class,f0,f1"));
    assert!(csv.lines().count() > 1);
    let reduction = String::from_utf8(read_bytes(&fx.path("out/reduction.txt"))).unwrap();
    assert!(reduction.contains("retention_percent"));
}

#[test]
fn ingest_then_rank_from_binary_database() {
    let fx = Fixture::new();
    write(&fx.path("toy.csv"), toy_csv());
    write(
        &fx.path("ingest.toml"),
        &format!(
            "out_dir = \"{}\"\n[input]\ncsv = \"{}\"\n",
            fx.path_str("out"),
            fx.path_str("toy.csv")
        ),
    );
    assert_status(&run(&["--config", &fx.path_str("ingest.toml"), "ingest"]), 0);
    assert!(fx.path("out/db.pdb").exists());

    write(
        &fx.path("rank.toml"),
        &format!(
            "k = 2\nbins = 2\nout_dir = \"{}\"\n[input]\ndb = \"{}\"\n",
            fx.path_str("out2"),
            fx.path_str("out/db.pdb")
        ),
    );
    assert_status(&run(&["--config", &fx.path_str("rank.toml"), "rank"]), 0);
    assert!(fx.path("out2/ranks.csv").exists());
}

#[test]
fn report_summarizes_run_artifacts() {
    let fx = Fixture::new();
    let tail = "[weights]\nalpha = 1.0\nbeta = 0.05\n[optimizer]\nbudget = 80\n";
    write(&fx.path("run.toml"), &blob_config(&fx, "out", tail));
    assert_status(&run(&["--config", &fx.path_str("run.toml"), "optimize"]), 0);
    assert_status(&run(&["--config", &fx.path_str("run.toml"), "evaluate"]), 0);
    let out = run(&["--config", &fx.path_str("run.toml"), "report"]);
    assert_status(&out, 0);
    let summary = String::from_utf8(read_bytes(&fx.path("out/summary.txt"))).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("row ")));
    assert!(summary.contains("seed 4"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("row "));
}

#[test]
fn conflicting_weight_sections_exit_2() {
    let fx = Fixture::new();
    let tail = "[weights]\nalpha = 1.0\nbeta = 0.05\n\
                [outer]\nalpha = [0.1, 1.0]\nbeta = [0.01, 0.1]\n";
    write(&fx.path("run.toml"), &blob_config(&fx, "out", tail));
    let out = run(&["--config", &fx.path_str("run.toml"), "optimize"]);
    assert_status(&out, 2);
}

#[test]
fn missing_config_flag_exits_2() {
    let out = run(&["rank"]);
    assert_status(&out, 2);
}

#[test]
fn seed_override_changes_generated_data() {
    let fx = Fixture::new();
    write(&fx.path("run.toml"), &blob_config(&fx, "out", ""));
    assert_status(&run(&["--config", &fx.path_str("run.toml"), "gen"]), 0);
    let first = read_bytes(&fx.path("out/train.csv"));
    assert_status(
        &run(&["--config", &fx.path_str("run.toml"), "--seed", "123", "gen"]),
        0,
    );
    assert_ne!(first, read_bytes(&fx.path("out/train.csv")));
}
