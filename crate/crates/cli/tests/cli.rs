use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const ONT_A: &str = include_str!("../../core/tests/fixtures/ont-a.txt");

fn ontorel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ontorel"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path) {
    let o = ontorel(dir, &["synth", "--instances", "150", "--seed", "3", "--out", "corpus"]);
    assert!(o.status.success(), "{o:?}");
}

const TRAIN: &[&str] = &[
    "train",
    "--onto",
    "corpus/primary.txt",
    "--train",
    "corpus/train.jsonl",
    "--valid",
    "corpus/valid.jsonl",
    "--epochs",
    "3",
    "--state-dim",
    "8",
    "--optimizer",
    "adam",
    "--seed",
    "5",
    "--threads",
    "1",
];

#[test]
fn paths_prints_the_axiom_route() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("onta.txt"), ONT_A).unwrap();
    let o = ontorel(dir.path(), &["paths", "--onto", "onta.txt", "--head", "C001", "--tail", "C002", "--hops", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o),
        "axiom\t3\tcausative agent of, sub class of some has finding, super class of\n"
    );
}

#[test]
fn unknown_config_key_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    fs::write(dir.path().join("bad.cfg"), "epochs = 2\nwarmup = 3\n").unwrap();
    let mut args = TRAIN.to_vec();
    args.extend(["--config", "bad.cfg", "--out", "run"]);
    let o = ontorel(dir.path(), &args);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warmup"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ontorel(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(ontorel(dir.path(), &["paths", "--bogus"]).status.code(), Some(1));
    let hops = ["paths", "--onto", "x.txt", "--head", "a", "--tail", "b", "--hops", "0"];
    assert_eq!(ontorel(dir.path(), &hops).status.code(), Some(1));
    assert_eq!(ontorel(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("onta.txt"), ONT_A).unwrap();
    fs::write(dir.path().join("broken.jsonl"), "{\"sentence\": \"no entities\"}\n").unwrap();
    let o = ontorel(dir.path(), &["coverage", "--onto", "onta.txt", "--data", "broken.jsonl", "--out", "cov"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("cov").exists());
    fs::write(dir.path().join("bad.txt"), "Q what is this\n").unwrap();
    let o = ontorel(dir.path(), &["ingest", "--onto", "bad.txt", "--out", "ing"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("ing").exists());
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    fs::write(dir.path().join("run.toml"), "epochs = 1\n").unwrap();
    let mut args = TRAIN.to_vec();
    args.extend(["--config", "run.toml", "--out", "run"]);
    let o = ontorel(dir.path(), &args);
    assert!(o.status.success(), "{o:?}");
    let config = fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(config.contains("epochs = 1\n"), "{config}");
    assert!(config.contains("state_dim = 8\n"), "{config}");
}

#[test]
fn threaded_training_is_reproducible_and_predictions_carry_traces() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let before = fs::read(dir.path().join("corpus/train.jsonl")).unwrap();
    for out in ["a", "b"] {
        let mut args = TRAIN.to_vec();
        args.extend(["--out", out]);
        let o = ontorel(dir.path(), &args);
        assert!(o.status.success(), "{o:?}");
    }
    for f in ["model.json", "train_log.jsonl", "config.toml"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    assert_eq!(fs::read(dir.path().join("corpus/train.jsonl")).unwrap(), before);

    // Strip the labels: prediction input needs none.
    let unlabeled: String = fs::read_to_string(dir.path().join("corpus/test.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("relation");
            v.to_string() + "\n"
        })
        .collect();
    fs::write(dir.path().join("input.jsonl"), &unlabeled).unwrap();
    let o = ontorel(dir.path(), &["predict", "--checkpoint", "a/model.json", "--input", "input.jsonl"]);
    assert!(o.status.success(), "{o:?}");
    let traces: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(traces.len(), unlabeled.lines().count());
    let biased = traces
        .iter()
        .find(|t| t["bias_relation"].is_string())
        .expect("some pair has a path");
    assert!(!biased["paths"]["paths"].as_array().unwrap().is_empty());
    assert!(biased["bias"].as_f64().unwrap() > 0.0);
    assert!(traces.iter().all(|t| t.get("gold").is_none()));

    let o = ontorel(
        dir.path(),
        &["eval", "--checkpoint", "a/model.json", "--data", "corpus/test.jsonl", "--out", "ev"],
    );
    assert!(o.status.success(), "{o:?}");
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["count"].as_u64().unwrap() as usize, traces.len());
}

#[test]
fn precompute_reuses_its_cache() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let args = [
        "precompute",
        "--onto",
        "corpus/primary.txt",
        "--data",
        "corpus/train.jsonl",
        "corpus/test.jsonl",
        "--hops",
        "3",
        "--out",
        "ctx",
    ];
    let first: serde_json::Value = serde_json::from_str(&stdout(&ontorel(dir.path(), &args))).unwrap();
    let second: serde_json::Value = serde_json::from_str(&stdout(&ontorel(dir.path(), &args))).unwrap();
    assert_eq!(first["cache_hits"], 0);
    assert!(first["non_empty"].as_u64().unwrap() > 0);
    assert_eq!(second["cache_hits"], first["pairs"]);
}

#[test]
fn merge_bench_and_ablation_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = ontorel(
        dir.path(),
        &["merge", "--onto", "corpus/primary.txt", "corpus/secondary.txt", "--out", "m"],
    );
    assert!(o.status.success(), "{o:?}");
    assert!(dir.path().join("m/merged.txt").exists());

    let o = ontorel(
        dir.path(),
        &["bench-parse", "--onto", "corpus/primary.txt", "--pair", "S000000:S000001", "--out", "b"],
    );
    assert!(o.status.success(), "{o:?}");
    let bench = fs::read_to_string(dir.path().join("b/bench.tsv")).unwrap();
    assert_eq!(bench.lines().count(), 2);
    assert!(bench.lines().nth(1).unwrap().ends_with("\tok"));

    let mut args = TRAIN.to_vec();
    args[0] = "ablate-hops";
    args.extend(["--test", "corpus/test.jsonl", "--hops-list", "1,2", "--out", "h"]);
    let o = ontorel(dir.path(), &args);
    assert!(o.status.success(), "{o:?}");
    let hops = fs::read_to_string(dir.path().join("h/hops.tsv")).unwrap();
    let rows: Vec<&str> = hops.lines().collect();
    assert_eq!(rows[0], "max_hops\tmacro_f1\tmicro_f1\taccuracy");
    assert!(rows[1].starts_with("1\t") && rows[2].starts_with("2\t"));
}
