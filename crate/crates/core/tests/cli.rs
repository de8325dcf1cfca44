//! End-to-end runs of the `qcea` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qcea(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcea")).current_dir(cwd).args(args).output().unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = qcea(cwd, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the parsed single-line JSON error.
fn fails(cwd: &Path, args: &[&str]) -> (i32, serde_json::Value) {
    let out = qcea(cwd, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let last = stderr.lines().last().unwrap();
    (out.status.code().unwrap(), serde_json::from_str(last).unwrap())
}

fn metric(tsv: &str, mode: &str, column: &str) -> f64 {
    let mut lines = tsv.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let col = header.iter().position(|h| *h == column).unwrap();
    let row = lines.find(|l| l.starts_with(&format!("{mode}\toverall\t"))).unwrap();
    row.split('\t').nth(col).unwrap().parse().unwrap()
}

#[test]
fn gen_is_byte_identical_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["--seed", "3", "gen", "--preset", "tiny", "--out", "a"]);
    ok(dir, &["--seed", "3", "gen", "--preset", "tiny", "--out", "b"]);
    ok(dir, &["--seed", "4", "gen", "--preset", "tiny", "--out", "c"]);
    let read = |d: &str, f: &str| fs::read(dir.join(d).join(f)).unwrap();
    let mut names: Vec<String> =
        fs::read_dir(dir.join("a")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert!(names.contains(&"manifest.json".to_string()));
    for f in &names {
        assert_eq!(read("a", f), read("b", f), "{f} differs");
    }
    assert!(names.iter().any(|f| read("a", f) != read("c", f)));
}

#[test]
fn noiseless_tiny_trains_to_perfect_hit_at_10() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen", "--preset", "tiny", "--out", "data"]);
    ok(dir, &["train", "--data", "data", "--out", "run", "--preset", "tiny"]);
    for f in ["model.ckpt", "train_log.jsonl", "config.json", "manifest.json"] {
        assert!(dir.join("run").join(f).exists(), "missing {f}");
    }
    let stdout = ok(dir, &["eval", "--data", "data", "--model", "run/model.ckpt", "--out", "eval"]);
    let tsv = fs::read_to_string(dir.join("eval/metrics.tsv")).unwrap();
    assert!(stdout.contains(tsv.lines().next().unwrap()));
    assert_eq!(metric(&tsv, "type", "Hit@10"), 1.0);
    assert!(dir.join("eval/metrics.jsonl").exists());
}

#[test]
fn procrustes_on_rotation_preset_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen", "--preset", "rotation", "--out", "data"]);
    ok(dir, &["train", "--data", "data", "--out", "run", "--method", "procrustes"]);
    ok(dir, &["eval", "--data", "data", "--model", "run/model.ckpt", "--out", "eval", "--k-list", "1"]);
    let tsv = fs::read_to_string(dir.join("eval/metrics.tsv")).unwrap();
    assert_eq!(metric(&tsv, "type", "Hit@1"), 1.0);
    assert_eq!(metric(&tsv, "full", "Hit@1"), 1.0);
}

#[test]
fn errors_are_single_json_lines_with_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen", "--preset", "tiny", "--out", "data"]);

    let (code, err) = fails(dir, &["eval", "--data", "data", "--model", "nope.ckpt", "--out", "eval"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (3, "missing_file"));

    let (code, err) = fails(dir, &["train", "--data", "data", "--out", "r", "--method", "qcea", "--source-input", "entity"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (4, "config_conflict"));

    let (code, _) = fails(dir, &["split", "--data", "data", "--out", "data"]);
    assert_eq!(code, 4);

    let (code, err) = fails(dir, &["train", "--data", "data", "--out", "r", "--ranks", "2,x,3"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "bad_value"));

    let (code, err) = fails(dir, &["frobnicate"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "usage"));

    let (code, err) = fails(dir, &["gen", "--preset", "huge", "--out", "x"]);
    assert_eq!(code, 4);
    assert!(err["message"].as_str().unwrap().contains("huge"));

    fs::write(dir.join("bad.ckpt"), b"not a checkpoint").unwrap();
    let (code, err) = fails(dir, &["eval", "--data", "data", "--model", "bad.ckpt", "--out", "eval"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (5, "checkpoint"));
}

#[test]
fn simulate_rag_and_predict_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen", "--preset", "tiny", "--out", "data"]);
    ok(dir, &["train", "--data", "data", "--out", "run", "--preset", "tiny"]);
    ok(dir, &["predict", "--data", "data", "--model", "run/model.ckpt", "--out", "pred", "--top", "5"]);
    let line = fs::read_to_string(dir.join("pred/predictions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert!(first.is_object());

    ok(dir, &["simulate-rag", "--data", "data", "--out", "rag", "--settings", "oracle,noalign", "--per-category", "2"]);
    let tsv = fs::read_to_string(dir.join("rag/rag.tsv")).unwrap();
    assert!(tsv.lines().any(|l| l.starts_with("oracle\toverall\t")));
    let (code, _) = fails(dir, &["simulate-rag", "--data", "data", "--out", "rag2", "--settings", "predicted"]);
    assert_ne!(code, 0);
}
