//! End-to-end runs of the binary.

use std::path::Path;
use std::process::{Command, Output};

fn fastref(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastref"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fastref(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).trim_end().to_string()
}

fn prepare(dir: &Path, extra: &[&str]) {
    let mut synth = vec!["synth", "--seed", "3", "--out", "data"];
    synth.extend_from_slice(extra);
    ok(dir, &synth);
    ok(
        dir,
        &[
            "build-prototypes",
            "--support",
            "data/support.ftz",
            "--ratio",
            "1",
            "--out",
            "data/bank.ftz",
        ],
    );
}

fn image_auroc(dir: &Path, sub: &str, flags: &[&str]) -> f64 {
    let mut args = vec![
        sub,
        "--bank",
        "data/bank.ftz",
        "--manifest",
        "data/manifest.jsonl",
        "--out",
        "run",
    ];
    args.extend_from_slice(flags);
    ok(dir, &args);
    let report = ok(
        dir,
        &[
            "eval",
            "--scores",
            "run/scores.json",
            "--manifest",
            "data/manifest.jsonl",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    let pixel = v["pixel_auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pixel));
    v["image_auroc"].as_f64().unwrap()
}

#[test]
fn refinement_does_not_lose_to_plain_lstsq() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), &[]);
    let refined = image_auroc(dir.path(), "score", &["--lambda", "0.3"]);
    let unbalanced = image_auroc(dir.path(), "score", &["--lambda", "0"]);
    assert!(refined >= unbalanced, "{refined} < {unbalanced}");
    let ttt = image_auroc(dir.path(), "baseline", &[]);
    assert!((0.0..=1.0).contains(&ttt));
    let lstsq = image_auroc(dir.path(), "baseline", &["--baseline", "lstsq"]);
    assert!((0.0..=1.0).contains(&lstsq));
}

#[test]
fn score_report_and_maps_are_written() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), &["--normal", "2", "--anomalous", "2"]);
    ok(
        dir.path(),
        &[
            "score",
            "--bank",
            "data/bank.ftz",
            "--manifest",
            "data/manifest.jsonl",
            "--out",
            "run",
            "--metric",
            "cosine",
        ],
    );
    let text = std::fs::read_to_string(dir.path().join("run/scores.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let images = v["images"].as_array().unwrap();
    assert_eq!(images.len(), 4);
    for img in images {
        let map = dir.path().join("run").join(img["map"].as_str().unwrap());
        let t = fastref::tensor_io::read_tensor(&map).unwrap();
        assert_eq!(t.dims(), vec![32, 32]);
        assert!(img["image_score"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();

    let out = fastref(p, &["score", "--nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error: usage: "));

    let out = fastref(p, &["bench", "--threads", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = fastref(
        p,
        &[
            "score",
            "--bank",
            "missing.ftz",
            "--manifest",
            "m.jsonl",
            "--out",
            "o",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let line = stderr_line(&out);
    assert!(
        line.starts_with("error: io: ") && line.contains("m.jsonl"),
        "{line}"
    );

    prepare(p, &["--anomalous", "0", "--normal", "3"]);
    let out = fastref(
        p,
        &[
            "baseline",
            "--bank",
            "data/bank.ftz",
            "--manifest",
            "data/manifest.jsonl",
            "--out",
            "run",
            "--baseline",
            "none",
        ],
    );
    assert_eq!(out.status.code(), Some(2));

    ok(
        p,
        &[
            "score",
            "--bank",
            "data/bank.ftz",
            "--manifest",
            "data/manifest.jsonl",
            "--out",
            "run",
        ],
    );
    let out = fastref(
        p,
        &[
            "eval",
            "--scores",
            "run/scores.json",
            "--manifest",
            "data/manifest.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).starts_with("error: undefined-metric: "));
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = fastref(dir.path(), &["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("build-prototypes"));
}
