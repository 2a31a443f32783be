use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const QUICK: &str = "\
# tiny run for tests
vocab.size = 320
mlm.max_steps = 12
mlm.warmup_steps = 3
cl.max_steps = 4
cl.warmup_steps = 1
finetune.epochs = 2
finetune.warmup_steps = 1
";

fn bugprio(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bugprio"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn bugprio")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bugprio(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Corpus, split, vocabulary and the three checkpoints in `dir`.
fn pipeline(dir: &Path) -> Vec<String> {
    std::fs::write(dir.join("quick.cfg"), QUICK).unwrap();
    let mut logs = Vec::new();
    ok(
        dir,
        &[
            "gen-corpus",
            "--labeled",
            "60",
            "--unlabeled",
            "10",
            "--out",
            "corpus.jsonl",
        ],
    );
    logs.push(ok(
        dir,
        &["split", "--corpus", "corpus.jsonl", "--out-dir", "split"],
    ));
    logs.push(ok(
        dir,
        &[
            "build-vocab",
            "--corpus",
            "split/train.jsonl",
            "--config",
            "quick.cfg",
            "--out",
            "vocab.txt",
        ],
    ));
    logs.push(ok(
        dir,
        &[
            "pretrain-mlm",
            "--corpus",
            "split/train.jsonl",
            "--vocab",
            "vocab.txt",
            "--config",
            "quick.cfg",
            "--seed",
            "3",
            "--out",
            "mlm.ckpt",
        ],
    ));
    logs.push(ok(
        dir,
        &[
            "pretrain-cl",
            "--corpus",
            "split/train.jsonl",
            "--vocab",
            "vocab.txt",
            "--init",
            "mlm.ckpt",
            "--method",
            "delete",
            "--tau",
            "0.1",
            "--out",
            "cl.ckpt",
        ],
    ));
    logs.push(ok(
        dir,
        &[
            "finetune",
            "--train",
            "split/train.jsonl",
            "--valid",
            "split/valid.jsonl",
            "--vocab",
            "vocab.txt",
            "--init",
            "cl.ckpt",
            "--out",
            "ft.ckpt",
        ],
    ));
    logs
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn evaluate_without_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bugprio(
        dir.path(),
        &["evaluate", "--test", "t.jsonl", "--vocab", "v.txt"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_exits_2_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        bugprio(dir.path(), &["gen-corpus", "--out", "x", "--bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(bugprio(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn validation_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["gen-corpus", "--labeled", "20", "--out", "c.jsonl"]);
    let bad_key = bugprio(
        p,
        &[
            "build-vocab",
            "--corpus",
            "c.jsonl",
            "--out",
            "v.txt",
            "--set",
            "encoder.colour=red",
        ],
    );
    assert_eq!(bad_key.status.code(), Some(1));
    let bad_heads = bugprio(
        p,
        &[
            "build-vocab",
            "--corpus",
            "c.jsonl",
            "--out",
            "v.txt",
            "--set",
            "encoder.heads=5",
        ],
    );
    assert_eq!(bad_heads.status.code(), Some(1));
    assert!(!p.join("v.txt").exists());
    std::fs::write(p.join("broken.jsonl"), "{\"id\": \"a\"}\nnot json\n").unwrap();
    let broken = bugprio(
        p,
        &["build-vocab", "--corpus", "broken.jsonl", "--out", "v.txt"],
    );
    assert_eq!(broken.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&broken.stderr).contains("line 1"));
}

#[test]
fn full_pipeline_runs_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let logs_a = pipeline(a.path());
    let logs_b = pipeline(b.path());
    assert_eq!(logs_a, logs_b);
    for f in ["vocab.txt", "mlm.ckpt", "cl.ckpt", "ft.ckpt"] {
        assert_eq!(
            read(a.path(), f),
            read(b.path(), f),
            "{f} differs between runs"
        );
    }

    // One JSON object per log line; MLM lines carry step, lr and loss.
    let mlm_lines: Vec<serde_json::Value> = logs_a[2]
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(mlm_lines.len(), 12 + 1);
    for l in &mlm_lines[..12] {
        assert!(l["step"].is_u64() && l["lr"].is_f64() && l["loss"].is_f64());
    }
    let cl_first: serde_json::Value =
        serde_json::from_str(logs_a[3].lines().next().unwrap()).unwrap();
    assert!(cl_first["alignment"].is_f64());

    let p = a.path();
    let out = ok(
        p,
        &[
            "evaluate",
            "--test",
            "split/test.jsonl",
            "--model",
            "ft.ckpt",
            "--vocab",
            "vocab.txt",
            "--report",
            "r.json",
        ],
    );
    let summary: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(summary["total"], 6);
    let report: serde_json::Value = serde_json::from_slice(&read(p, "r.json")).unwrap();
    for k in [
        "accuracy",
        "weighted",
        "per_class",
        "confusion",
        "length_buckets",
        "argmax_ties",
    ] {
        assert!(report.get(k).is_some(), "missing {k}");
    }

    let mut child = Command::new(env!("CARGO_BIN_EXE_bugprio"))
        .current_dir(p)
        .args(["predict", "--model", "ft.ckpt", "--vocab", "vocab.txt"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(br#"{"id": "q", "summary": "editor crash", "description": "segfault on save"}"#)
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let dist: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let probs = dist["probs"].as_object().unwrap();
    assert_eq!(probs.len(), 5);
    let total: f64 = probs.values().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn stage_order_and_vocab_are_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    pipeline(p);
    let refused = bugprio(
        p,
        &[
            "pretrain-cl",
            "--corpus",
            "split/train.jsonl",
            "--vocab",
            "vocab.txt",
            "--init",
            "ft.ckpt",
            "--out",
            "x.ckpt",
        ],
    );
    assert_eq!(refused.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("mlm-tagged"));
    assert!(!p.join("x.ckpt").exists());
    ok(
        p,
        &[
            "pretrain-cl",
            "--corpus",
            "split/train.jsonl",
            "--vocab",
            "vocab.txt",
            "--init",
            "ft.ckpt",
            "--allow-any-init",
            "--out",
            "x.ckpt",
        ],
    );

    ok(
        p,
        &[
            "build-vocab",
            "--corpus",
            "split/train.jsonl",
            "--vocab-size",
            "300",
            "--out",
            "other.txt",
        ],
    );
    let mismatch = bugprio(
        p,
        &[
            "finetune",
            "--train",
            "split/train.jsonl",
            "--vocab",
            "other.txt",
            "--init",
            "mlm.ckpt",
            "--out",
            "y.ckpt",
        ],
    );
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("vocabulary hash mismatch"));
}

#[test]
fn ablate_cl_onoff_emits_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("quick.cfg"), QUICK).unwrap();
    ok(p, &["gen-corpus", "--labeled", "40", "--out", "c.jsonl"]);
    let table = ok(
        p,
        &[
            "ablate",
            "--grid",
            "cl-onoff",
            "--corpus",
            "c.jsonl",
            "--config",
            "quick.cfg",
            "--seeds",
            "1",
            "--report",
            "a.json",
        ],
    );
    assert!(
        table.contains("w/o CL") && table.contains("w/ CL"),
        "{table}"
    );
    let report: serde_json::Value = serde_json::from_slice(&read(p, "a.json")).unwrap();
    assert_eq!(report["grid"], "cl-onoff");
    assert_eq!(report["cells"].as_array().unwrap().len(), 2);
}
