use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use gradtail_core::experiment::toy_init;
use gradtail_core::nn::MlpModel;
use gradtail_core::record::Record;
use gradtail_core::report::ExperimentReport;
use tempfile::TempDir;

fn bin(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_gradtail"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn run(dir: &Path, args: &[&str]) -> (i32, String) {
    let (code, stdout, stderr) = bin(args, dir);
    assert_eq!(code, 0, "{args:?} failed: {stderr}");
    (code, stdout)
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

fn report(dir: &Path) -> ExperimentReport {
    ExperimentReport::from_record(&Record::read(&dir.join("report.txt")).unwrap()).unwrap()
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    dirs
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "c.cfg", "experiment.kind = toy\nexperiment.data_seeds = 4\n");
    run(tmp.path(), &["gen-data", "--config", &cfg, "--out", "a"]);
    run(tmp.path(), &["gen-data", "--config", &cfg, "--out", "b"]);
    let (a, b) = (tmp.path().join("a/data/seed4"), tmp.path().join("b/data/seed4"));
    assert_eq!(csv_rows(&a.join("dataset.csv")), 10_400);
    for f in ["dataset.csv", "manifest.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn gen_data_hard_variant_passes_dominance_check() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "c.cfg", "experiment.kind = toy_hard\n");
    run(tmp.path(), &["gen-data", "--config", &cfg, "--out", "o"]);
    let manifest = fs::read_to_string(tmp.path().join("o/data/seed0/manifest.txt")).unwrap();
    assert!(manifest.contains("experiment.kind = toy_hard"));
}

#[test]
fn zero_step_run_directory_is_valid() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "c.cfg", "train.steps = 0\nexperiment.model_seeds = 3\n");
    run(tmp.path(), &["train", "--config", &cfg, "--out", "o"]);
    let dir = tmp.path().join("o/runs/gradtail-m3-d3");
    let model = MlpModel::load(&dir.join("model.txt")).unwrap();
    assert_eq!(model.flat_params(), toy_init(3).flat_params());
    assert_eq!(csv_rows(&dir.join("step_log.csv")), 0);
    assert_eq!(csv_rows(&dir.join("traces.csv")), 10_400);
    assert!(dir.join("gradtail_state.txt").is_file());
}

#[test]
fn default_toy_run_completes_full_schedule() {
    let tmp = TempDir::new().unwrap();
    run(tmp.path(), &["train", "--out", "o"]);
    let dir = tmp.path().join("o/runs/gradtail-m0-d0");
    assert_eq!(csv_rows(&dir.join("step_log.csv")), 10_000);
    assert_eq!(csv_rows(&dir.join("traces.csv")), 10_400);
}

#[test]
fn seed_batch_gives_distinct_run_directories() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "c.cfg", "train.steps = 3\n");
    run(tmp.path(), &["train", "--config", &cfg, "--out", "o", "--seeds", "20"]);
    let dirs = run_dirs(&tmp.path().join("o/runs"));
    assert_eq!(dirs.len(), 20);
    let mut seeds: Vec<u64> = dirs
        .iter()
        .map(|d| Record::read(&d.join("manifest.txt")).unwrap().parse_value("experiment.model_seeds").unwrap())
        .collect();
    seeds.sort_unstable();
    assert_eq!(seeds, (0..20).collect::<Vec<u64>>());
}

#[test]
fn manifest_reproduces_run_bit_for_bit() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        tmp.path(),
        "c.cfg",
        "train.steps = 60\ntrain.learning_rate = 0.05\nexperiment.model_seeds = 2\n",
    );
    run(tmp.path(), &["train", "--config", &cfg, "--out", "a"]);
    let first = tmp.path().join("a/runs/gradtail-m2-d2");
    let manifest = first.join("manifest.txt").to_string_lossy().into_owned();
    run(tmp.path(), &["train", "--config", &manifest, "--out", "b", "--reference-mode"]);
    let second = tmp.path().join("b/runs/gradtail-m2-d2");
    for f in ["model.txt", "step_log.csv", "traces.csv", "gradtail_state.txt"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn analyze_summarizes_strategies_across_seeds() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        tmp.path(),
        "c.cfg",
        "train.steps = 100\ntrain.learning_rate = 0.05\nexperiment.model_seeds = 0,1\n\
         grid.0.name = uniform\ngrid.1.name = gradtail\n",
    );
    run(tmp.path(), &["train", "--config", &cfg, "--out", "o"]);
    let (_, table) = run(tmp.path(), &["analyze", "--config", &cfg, "--out", "o"]);
    let header = table.lines().next().unwrap();
    assert!(header.contains("uniform") && header.contains("gradtail"));
    assert!(table.lines().any(|l| l.starts_with("balanced_accuracy")));
    let summary = tmp.path().join("o/summary_gradtail.txt");
    let s = ExperimentReport::from_record(&Record::read(&summary).unwrap()).unwrap();
    assert_eq!(s.get("runs"), Some(2.0));
    for dir in run_dirs(&tmp.path().join("o/runs")) {
        for fig in ["scatter", "prediction", "tail_labels", "entropy"] {
            let svg = fs::read_to_string(dir.join(format!("figures/{fig}.svg"))).unwrap();
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        }
    }
}

#[test]
fn single_run_analysis_has_no_summary_and_lists_gaps() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "c.cfg", "train.steps = 20\ntrain.trace_logging = false\n");
    run(tmp.path(), &["train", "--config", &cfg, "--out", "o"]);
    let dir = tmp.path().join("o/runs/gradtail-m0-d0");
    let (_, out) = run(tmp.path(), &["analyze", dir.to_str().unwrap(), "--out", "o"]);
    assert!(!tmp.path().join("o/summary.txt").exists());
    assert!(out.contains("gap: example traces missing"));
    let r = report(&dir);
    assert!(r.get("balanced_accuracy").is_some());
    assert!(r.get("tail.rare").is_none());
    assert!(!r.gaps.is_empty());
    assert!(!dir.join("figures/tail_labels.svg").exists());
}

#[test]
fn hard_variant_report_flags_rare_set() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        tmp.path(),
        "c.cfg",
        "experiment.kind = toy_hard\ntrain.steps = 100\ntrain.learning_rate = 0.05\n",
    );
    run(tmp.path(), &["train", "--config", &cfg, "--out", "o"]);
    run(tmp.path(), &["analyze", "--config", &cfg, "--out", "o"]);
    let r = report(&tmp.path().join("o/runs/gradtail-m0-d0"));
    assert!(r.metrics.iter().any(|m| m.name == "rare.empty"));
}

#[test]
fn sweep_builds_one_column_per_value() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "c.cfg", "train.steps = 40\ntrain.learning_rate = 0.05\n");
    let (_, table) = run(
        tmp.path(),
        &["sweep", "--config", &cfg, "--out", "o", "--param", "inverse_frequency_w", "--values", "1,5,15,25"],
    );
    assert!(table.lines().next().unwrap().ends_with("inverse_frequency_w=25"));
    let panel = fs::read_to_string(tmp.path().join("o/sweep/inverse_frequency_w/panel.svg")).unwrap();
    assert_eq!(panel.matches("<g transform").count(), 4);
}

#[test]
fn sweep_pairing_errors_before_any_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "c.cfg", "experiment.kind = dense_demo\n");
    let (code, _, err) = bin(
        &["sweep", "--config", &cfg, "--out", "o", "--param", "inverse_frequency_w", "--values", "5"],
        tmp.path(),
    );
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = bin(&["sweep", "--out", "o", "--param", "max_weight", "--values", "0.5"], tmp.path());
    assert_eq!(code, 2);
    let (code, _, _) = bin(&["sweep", "--out", "o", "--param", "temperature", "--values", "1"], tmp.path());
    assert_eq!(code, 2);
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn dense_demo_reports_band_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        tmp.path(),
        "c.cfg",
        "experiment.kind = dense_demo\ndense.steps = 5\ndense_task.height = 16\ndense_task.width = 16\n",
    );
    let (_, table) = run(tmp.path(), &["dense-demo", "--config", &cfg, "--out", "o"]);
    assert!(table.lines().next().unwrap().contains("uniform"));
    assert!(table.lines().any(|l| l.starts_with("mre.40-60")));
    let run_dir = tmp.path().join("o/dense_demo/runs/gradtail-m0-d0");
    assert!(csv_rows(&run_dir.join("patch_traces.csv")) > 0);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    assert_eq!(bin(&["train", "--bogus"], p).0, 2);
    assert_eq!(bin(&["train", "--config", "missing.cfg"], p).0, 4);
    let bad = config(p, "bad.cfg", "experiment.kind = imagenet\n");
    assert_eq!(bin(&["train", "--config", &bad], p).0, 2);
    let zero = config(p, "zero.cfg", "experiment.model_seeds = \n");
    assert_eq!(bin(&["train", "--config", &zero], p).0, 2);

    let nan = config(p, "nan.cfg", "train.steps = 20\ntrain.learning_rate = 1.7976931348623157e308\n");
    let (code, _, err) = bin(&["train", "--config", &nan, "--out", "n"], p);
    assert_eq!(code, 3, "{err}");
    let snapshot = p.join("n/runs/gradtail-m0-d0/abort_model.txt");
    assert!(err.contains(&snapshot.file_name().unwrap().to_string_lossy().into_owned()));
    assert!(MlpModel::load(&snapshot).is_ok());

    fs::write(p.join("blocker"), "").unwrap();
    assert_eq!(bin(&["gen-data", "--out", "blocker"], p).0, 4);
}

#[test]
fn library_entry_point_matches_binary() {
    assert_eq!(gradtail_cli::run(["gradtail", "--help"]), 0);
    assert_eq!(gradtail_cli::run(["gradtail", "sweep", "--values", "1"]), 2);
}
