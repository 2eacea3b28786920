//! The `qrrank` binary end to end, plus its exit codes.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_qrrank");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).env("QRRANK_LOG", "warn").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

fn setup(dir: &Path) {
    write(
        dir,
        "data.toml",
        "seed = 1\nn_corpora = 1\nqueries_per_corpus = 12\nn_chunks = 60\nchunk_len = 4\n[build]\nk = 10\nforce_gold = true\n",
    );
    write(dir, "model.toml", "n_layers = 2\nn_heads = 2\nd_model = 32\nmax_seq_len = 512\nmax_candidates = 20\n");
    write(dir, "train.toml", "learning_rate = 1e-3\nepochs = 1\n");
    ok(dir, &["init", "--config", "model.toml", "--out", "m.ckpt", "--seed", "3"]);
    ok(dir, &["gen-data", "--config", "data.toml", "--out", "d.jsonl"]);
    ok(dir, &["probe", "--seed-set", "d.jsonl", "--model", "m.ckpt", "--top-k", "2", "--out", "heads.txt"]);
}

#[test]
fn full_lifecycle() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    assert_eq!(std::fs::read_to_string(dir.join("d.jsonl")).unwrap().lines().count(), 12);
    assert_eq!(std::fs::read_to_string(dir.join("heads.txt")).unwrap().lines().filter(|l| !l.is_empty()).count(), 2);

    ok(
        dir,
        &[
            "train",
            "--config",
            "train.toml",
            "--data",
            "d.jsonl",
            "--model",
            "m.ckpt",
            "--heads",
            "heads.txt",
            "--out",
            "run",
        ],
    );
    for f in ["final.ckpt", "metrics.jsonl", "summary.json", "train_config.json", "heads.txt"] {
        assert!(dir.join("run").join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(dir.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }

    ok(dir, &["rerank", "--model", "run/final.ckpt", "--heads", "heads.txt", "--data", "d.jsonl", "--out", "r.jsonl"]);
    let ranked = std::fs::read_to_string(dir.join("r.jsonl")).unwrap();
    assert_eq!(ranked.lines().count(), 12);
    let first: serde_json::Value = serde_json::from_str(ranked.lines().next().unwrap()).unwrap();
    let mut ranking: Vec<u64> = first["ranking"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    ranking.sort_unstable();
    assert_eq!(ranking, (0..10).collect::<Vec<_>>());

    let table = ok(
        dir,
        &[
            "eval",
            "--model",
            "run/final.ckpt",
            "--heads",
            "heads.txt",
            "--data",
            "syn=d.jsonl",
            "--k",
            "1,3",
            "--out",
            "e.json",
        ],
    );
    assert!(table.contains("syn"), "{table}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("e.json")).unwrap()).unwrap();
    let text = report.to_string();
    assert!(text.contains("syn"), "{text}");

    let bench = ok(
        dir,
        &[
            "bench",
            "--model",
            "run/final.ckpt",
            "--heads",
            "heads.txt",
            "--data",
            "d.jsonl",
            "--queries",
            "5",
            "--out",
            "b.json",
        ],
    );
    assert!(bench.contains("full") || bench.contains("truncate"), "{bench}");
    let b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("b.json")).unwrap()).unwrap();
    assert!(b.to_string().contains("latency_p50_ms"));
}

#[test]
fn identical_runs_write_identical_rankings() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    for out in ["a.jsonl", "b.jsonl"] {
        ok(
            dir,
            &["rerank", "--model", "m.ckpt", "--heads", "heads.txt", "--data", "d.jsonl", "--out", out, "--calibrate"],
        );
    }
    assert_eq!(std::fs::read(dir.join("a.jsonl")).unwrap(), std::fs::read(dir.join("b.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = run(dir, &["probe", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[usage]"));

    let out = run(dir, &["gen-data", "--config", "missing.toml", "--out", "d.jsonl"]);
    assert_eq!(out.status.code(), Some(2));

    write(dir, "bad.toml", "seed = \"one\"\n");
    let out = run(dir, &["gen-data", "--config", "bad.toml", "--out", "d.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]"));
}

#[test]
fn heads_and_gated_are_exclusive() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let out = run(
        dir,
        &["rerank", "--model", "m.ckpt", "--heads", "heads.txt", "--gated", "--data", "d.jsonl", "--out", "r.jsonl"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir, &["rerank", "--model", "m.ckpt", "--data", "d.jsonl", "--out", "r.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn outputs_are_protected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let before = std::fs::read(dir.join("d.jsonl")).unwrap();

    let out =
        run(dir, &["rerank", "--model", "m.ckpt", "--heads", "heads.txt", "--data", "d.jsonl", "--out", "d.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(std::fs::read(dir.join("d.jsonl")).unwrap(), before);

    let out = run(dir, &["gen-data", "--config", "data.toml", "--out", "d.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(std::fs::read(dir.join("d.jsonl")).unwrap(), before);

    ok(dir, &["gen-data", "--config", "data.toml", "--out", "d.jsonl", "--seed", "9", "--force"]);
    assert_ne!(std::fs::read(dir.join("d.jsonl")).unwrap(), before);
}

#[test]
fn help_and_version_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let help = ok(tmp.path(), &["--help"]);
    for cmd in ["init", "gen-data", "probe", "train", "rerank", "eval", "bench", "serve"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
    assert!(ok(tmp.path(), &["--version"]).contains("qrrank"));
}
