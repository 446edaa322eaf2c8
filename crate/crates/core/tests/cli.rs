//! Integration tests for the command-line interface, run against the real
//! binary with small corpora and model dimensions.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gcfuse")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gcfuse_cli_{name}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_CONFIG: &str = "\
[data]
n = 150

[model]
dim = 16
layers = 1
heads = 2
ff_dim = 32
max_len = 16

[train]
batch_size = 16
max_epochs = 2
patience = 2
seeds = 0,1
";

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{TINY_CONFIG}{extra}")).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_writes_manifest() {
    let dir = scratch("gen");
    let config = write_config(&dir, "");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        run_ok(&["gen-data", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    let a = fs::read(out_a.join("corpus.tsv")).unwrap();
    let b = fs::read(out_b.join("corpus.tsv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "same generation config must give identical corpus files");
    let manifest = fs::read_to_string(out_a.join("corpus.manifest")).unwrap();
    assert!(manifest.contains("documents = 150"), "manifest: {manifest}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn train_writes_per_seed_rows_models_and_manifest() {
    let dir = scratch("train");
    let config = write_config(&dir, "");
    let out = dir.join("out");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--variant",
        "gnn_gcn",
    ]);
    let results = fs::read_to_string(out.join("results.tsv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines.len(), 4, "header + 2 seed rows + mean row, got:\n{results}");
    assert!(lines[0].starts_with("variant\t"));
    assert!(lines[1].starts_with("gnn_gcn\t0\t"));
    assert!(lines[2].starts_with("gnn_gcn\t1\t"));
    assert!(lines[3].contains("\tmean\t"));
    assert!(out.join("model_gnn_gcn_seed0.bin").exists());
    assert!(out.join("model_gnn_gcn_seed1.bin").exists());
    let manifest = fs::read_to_string(out.join("manifest_gnn_gcn.txt")).unwrap();
    assert!(manifest.contains("status = complete"));
    assert!(manifest.contains("seeds = 0,1"));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn seed_list_override_applies() {
    let dir = scratch("seeds");
    let config = write_config(&dir, "");
    let out = dir.join("out");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "7",
        "--variant",
        "gnn_gcn",
    ]);
    let results = fs::read_to_string(out.join("results.tsv")).unwrap();
    assert_eq!(results.lines().count(), 3, "header + 1 row + mean:\n{results}");
    assert!(results.contains("gnn_gcn\t7\t"));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn grid_skips_completed_variants_on_rerun() {
    let dir = scratch("grid");
    let config = write_config(&dir, "[model]\ngrid = gnn_gcn,lm_only\n");
    let out = dir.join("out");
    let first = run_ok(&["grid", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!first.contains("skipping"));
    let results_before = fs::read(out.join("results.tsv")).unwrap();
    assert!(out.join("summary.tsv").exists());

    let second = run_ok(&["grid", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(second.contains("gnn_gcn: already complete, skipping"), "{second}");
    assert!(second.contains("lm_only: already complete, skipping"), "{second}");
    let results_after = fs::read(out.join("results.tsv")).unwrap();
    assert_eq!(results_before, results_after, "rerun must not duplicate result rows");

    // The summary table covers both variants with one aggregate row each.
    let summary = fs::read_to_string(out.join("summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "header + 2 variants:\n{summary}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn grid_reruns_when_config_changes() {
    let dir = scratch("gridhash");
    let config = write_config(&dir, "[model]\ngrid = gnn_gcn\n");
    let out = dir.join("out");
    run_ok(&["grid", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    // Changing a setting that affects results invalidates the stored manifest.
    let changed = dir.join("changed.cfg");
    fs::write(&changed, format!("{TINY_CONFIG}lr_other = 0.0005\n\n[model]\ngrid = gnn_gcn\n")).unwrap();
    let rerun = run_ok(&["grid", "--config", changed.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!rerun.contains("skipping"), "changed config must retrain: {rerun}");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn aggregate_pools_runs_across_files() {
    let dir = scratch("agg");
    let config = write_config(&dir, "");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for (out, seeds) in [(&out_a, "0,1"), (&out_b, "2")] {
        run_ok(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seeds",
            seeds,
            "--variant",
            "gnn_gcn",
        ]);
    }
    let table_dir = dir.join("table");
    let stdout = run_ok(&[
        "aggregate",
        out_a.join("results.tsv").to_str().unwrap(),
        out_b.join("results.tsv").to_str().unwrap(),
        "--out",
        table_dir.to_str().unwrap(),
    ]);
    // 3 runs pooled across the two files.
    let row = stdout.lines().find(|l| l.starts_with("gnn_gcn\t")).expect("variant row");
    assert_eq!(row.split('\t').nth(1), Some("3"), "pooled run count in: {row}");
    let written = fs::read_to_string(table_dir.join("aggregate.tsv")).unwrap();
    assert_eq!(written, stdout);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn bad_inputs_exit_nonzero_with_config_errors_distinguished() {
    // Unknown variant: configuration error, exit code 1.
    let out = run(&["train", "--variant", "definitely_not_real", "--seeds", "0"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // Malformed seed list: configuration error.
    let out = run(&["train", "--seeds", "0,banana"]);
    assert_eq!(out.status.code(), Some(1));

    // Missing config file: I/O error, exit code 2.
    let out = run(&["train", "--config", "/nonexistent/path.cfg"]);
    assert_eq!(out.status.code(), Some(2));

    // Aggregate without inputs: contract error.
    let out = run(&["aggregate"]);
    assert_eq!(out.status.code(), Some(1));
}
