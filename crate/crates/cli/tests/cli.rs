//! Black-box tests of the `gcl4sr` binary.
//!
//! `fixtures/tiny` was produced by the binary itself: `synth --kind sparse
//! --items 12 --users 15 --min-len 4 --max-len 8 --noise 0.2 --seed 3
//! --structure-seed 3`, `prepare --k-core 2`, `build-graph`, `train` with
//! `fixtures/tiny/config.toml`, then `eval --k 5,10` per mode into the
//! `golden_*.txt` files.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny").join(name)
}

fn gcl4sr(args: &[&str]) -> Output {
    gcl4sr_env(args, &[])
}

fn gcl4sr_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gcl4sr"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gcl4sr(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes and prepares a corpus under `root`; returns the prepared dir.
fn prepared(root: &Path, synth: &[&str], k_core: &str) -> PathBuf {
    let syn = root.join("syn");
    let prep = root.join("prep");
    let mut args = vec!["synth", "--out", s(&syn)];
    args.extend_from_slice(synth);
    ok(&args);
    ok(&["prepare", "--log", s(&syn.join("interactions.tsv")), "--k-core", k_core, "--out", s(&prep)]);
    prep
}

const FAST: &str = "max_epochs = 1\nbatch_size = 8\ndim = 8\nlayers = 1\nmax_len = 6\nsample_size = 3\n";

fn fast_config(root: &Path) -> PathBuf {
    let p = root.join("fast.toml");
    fs::write(&p, FAST).unwrap();
    p
}

fn manifest_stats(dir: &Path) -> HashMap<String, String> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .filter_map(|l| l.strip_prefix("stat.")?.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn prepare_reports_counts_in_manifest() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(tmp.path(), &["--items", "10", "--users", "20"], "1");
    let stats = manifest_stats(&prep);
    assert_eq!(stats["users"], "20");
    assert_eq!(stats["items"], "10");
    for name in ["items.tsv", "users.tsv", "sequences.tsv", "split_manifest.txt"] {
        assert!(prep.join(name).is_file(), "{name}");
    }
}

#[test]
fn prepare_missing_log_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("absent.tsv");
    let out = gcl4sr(&["prepare", "--log", s(&missing), "--out", s(&tmp.path().join("p"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.tsv"));
}

#[test]
fn five_core_output_passes_audit() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(
        tmp.path(),
        &["--kind", "sparse", "--items", "60", "--users", "80", "--min-len", "3", "--max-len", "12", "--noise", "0.5"],
        "5",
    );
    let text = fs::read_to_string(prep.join("sequences.tsv")).unwrap();
    let mut items: HashMap<&str, usize> = HashMap::new();
    let mut users = 0;
    for line in text.lines() {
        let seq: Vec<&str> = line.split('\t').nth(1).unwrap().split(' ').collect();
        assert!(seq.len() >= 5, "{line}");
        for i in seq {
            *items.entry(i).or_default() += 1;
        }
        users += 1;
    }
    assert!(users > 0);
    assert!(items.values().all(|&c| c >= 5));
}

#[test]
fn cyclic_graph_has_thirty_edges_and_rebuilds_identically() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(tmp.path(), &["--items", "10", "--users", "20"], "1");
    let stats = ok(&["build-graph", "--data", s(&prep), "--out", s(&tmp.path().join("g1"))]);
    assert!(stats.lines().any(|l| l == "edges = 30"), "{stats}");
    ok(&["build-graph", "--data", s(&prep), "--out", s(&tmp.path().join("g2"))]);
    let a = fs::read(tmp.path().join("g1/graph.txt")).unwrap();
    let b = fs::read(tmp.path().join("g2/graph.txt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn build_graph_on_empty_dir_fails() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = gcl4sr(&["build-graph", "--data", s(&empty), "--out", s(&tmp.path().join("g"))]);
    assert!(!out.status.success());
}

#[test]
fn eval_matches_golden_reports() {
    for mode in ["valid", "test"] {
        let got = ok(&[
            "eval",
            "--checkpoint",
            s(&fixture("model.ckpt")),
            "--data",
            s(&fixture("prepared")),
            "--graph",
            s(&fixture("graph.txt")),
            "--mode",
            mode,
            "--k",
            "5,10",
        ]);
        let golden = fs::read_to_string(fixture(&format!("golden_{mode}.txt"))).unwrap();
        assert_eq!(got, golden, "{mode}");
    }
}

#[test]
fn eval_table_format_and_output_dir() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("e");
    let table = ok(&[
        "eval",
        "--checkpoint",
        s(&fixture("model.ckpt")),
        "--data",
        s(&fixture("prepared")),
        "--format",
        "table",
        "--k",
        "5,10",
        "--out",
        s(&out),
    ]);
    assert!(table.starts_with("mode"));
    // Rebuilding the graph from the data reproduces the committed one.
    let written = fs::read_to_string(out.join("eval_test.txt")).unwrap();
    assert_eq!(written, fs::read_to_string(fixture("golden_test.txt")).unwrap());
}

#[test]
fn zero_epochs_emits_initial_checkpoint_and_metrics() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    let cfg = fast_config(tmp.path());
    let out = gcl4sr_env(
        &["train", "--config", s(&cfg), "--data", s(&fixture("prepared")), "--out", s(&run)],
        &[("GCL4SR_MAX_EPOCHS", "0")],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = fs::read_to_string(run.join("best.ckpt")).unwrap();
    assert!(ckpt.lines().any(|l| l == "meta epoch 0"));
    assert_eq!(manifest_stats(&run)["epochs_run"], "0");
    let report = fs::read_to_string(run.join("test_report.txt")).unwrap();
    assert!(report.contains("hr@10 = "));
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    for artifact in ["best.ckpt", "last.ckpt", "metrics.log", "test_report.txt", "config.toml"] {
        assert!(manifest.contains(&format!("artifact = {artifact} sha256:")), "{artifact}");
    }
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = fast_config(tmp.path());
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        ok(&["train", "--config", s(&cfg), "--seed", "5", "--data", s(&fixture("prepared")), "--out", s(&dir)]);
        ["metrics.log", "best.ckpt", "last.ckpt", "test_report.txt"].map(|f| fs::read(dir.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
    let seed = fs::read_to_string(tmp.path().join("a/config.toml")).unwrap();
    assert!(seed.lines().any(|l| l == "seed = 5"));
}

#[test]
fn ablate_grid_has_the_four_variants() {
    let tmp = TempDir::new().unwrap();
    let cfg = fast_config(tmp.path());
    let out = tmp.path().join("abl");
    let grid = ok(&["ablate", "--config", s(&cfg), "--data", s(&fixture("prepared")), "--out", s(&out)]);
    let labels: Vec<&str> = grid.lines().skip(1).map(|l| l[..8].trim()).collect();
    assert_eq!(labels, ["full", "w/o G", "w/o GM", "w/o W"]);
    assert_eq!(fs::read_to_string(out.join("ablation_grid.txt")).unwrap(), grid);
}

#[test]
fn ablate_keeps_partial_results_when_a_variant_fails() {
    let tmp = TempDir::new().unwrap();
    let cfg = fast_config(tmp.path());
    let out = tmp.path().join("abl");
    fs::create_dir_all(&out).unwrap();
    // A plain file where the variant's directory should go.
    fs::write(out.join("no_gcl-seed0"), "").unwrap();
    let res = gcl4sr(&["ablate", "--config", s(&cfg), "--data", s(&fixture("prepared")), "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("no_gcl-seed0"));
    let grid = fs::read_to_string(out.join("ablation_grid.txt")).unwrap();
    let seeds: Vec<&str> = grid.lines().skip(1).map(|l| l[8..].split_whitespace().next().unwrap()).collect();
    assert_eq!(seeds, ["1", "0", "1", "1"], "{grid}");
    assert!(out.join("unweighted_edges-seed0/best.ckpt").is_file());
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join(".gcl4sr.lock"), "1\n").unwrap();
    let cfg = fast_config(tmp.path());
    let data = fixture("prepared");
    let args = ["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)];
    let res = gcl4sr(&args);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("in use"));
    assert!(!run.join("best.ckpt").exists());

    fs::remove_file(run.join(".gcl4sr.lock")).unwrap();
    ok(&args);
    assert!(!run.join(".gcl4sr.lock").exists());
}

#[test]
fn bad_environment_override_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let res = gcl4sr_env(
        &["train", "--data", s(&fixture("prepared")), "--out", s(&tmp.path().join("r"))],
        &[("GCL4SR_NOT_A_KEY", "1")],
    );
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("not_a_key"));
}
