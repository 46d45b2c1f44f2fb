//! Command-line behaviour: exit codes, error reporting and an end-to-end run.

use std::path::Path;
use std::process::{Command, Output};

fn apesed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apesed")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = apesed(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{line}: {e}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn version_and_help_exit_zero() {
    assert_eq!(apesed(&["--version"]).status.code(), Some(0));
    assert_eq!(apesed(&["--help"]).status.code(), Some(0));
    assert_eq!(apesed(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    let out = apesed(&["train", "--epochs", "many"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["code"], 2);
    assert_eq!(apesed(&["bogus"]).status.code(), Some(2));
}

#[test]
fn missing_manifest_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let out = apesed(&["split", "--manifest", p(&dir.path().join("none.json")), "--seed", "1", "--out", p(&dir.path().join("s.json"))]);
    assert_eq!(out.status.code(), Some(5));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "Io");
    assert!(err["error"]["message"].as_str().unwrap().contains("none.json"));
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", p(d), "--clips", "5"]);
    let manifest = d.join("manifest.json");
    ok(&["featurize", "--manifest", p(&manifest)]);
    ok(&["annotate", "--manifest", p(&manifest), "--annotations", p(&d.join("annotations.tsv"))]);
    ok(&["split", "--manifest", p(&manifest), "--seed", "0", "--out", p(&d.join("split.json"))]);
    let out = apesed(&[
        "train", "--manifest", p(&manifest), "--split", p(&d.join("split.json")),
        "--arch", "transformer", "--hidden", "10", "--heads", "3", "--out", p(&d.join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "BadConfig");
}

#[test]
fn end_to_end_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = d.join("corpus/manifest.json");
    let split = d.join("split.json");
    let run = d.join("run");
    ok(&["synth", "--out", p(&d.join("corpus")), "--seed", "2", "--clips", "10", "--classes", "2"]);
    ok(&["featurize", "--manifest", p(&manifest)]);
    ok(&["annotate", "--manifest", p(&manifest), "--annotations", p(&d.join("corpus/annotations.tsv"))]);
    ok(&["split", "--manifest", p(&manifest), "--seed", "3", "--out", p(&split)]);
    ok(&[
        "train", "--manifest", p(&manifest), "--split", p(&split), "--arch", "ar_blstm",
        "--hidden", "8", "--epochs", "2", "--lr", "0.001", "--out", p(&run),
    ]);
    for f in ["model.ckpt", "trainlog.jsonl", "run.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("trainlog.jsonl")).unwrap();
    assert!(log.lines().count() >= 2);
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }

    let report = d.join("report.json");
    ok(&["eval", "--ckpt", p(&run.join("model.ckpt")), "--manifest", p(&manifest), "--split", p(&split), "--out", p(&report)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let acc = r["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(r["confusion"].as_array().unwrap().len(), 3);
    let run_manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json.run.json")).unwrap()).unwrap();
    assert_eq!(run_manifest["command"], "eval");

    let wav = std::fs::read_dir(d.join("corpus/wav")).unwrap().next().unwrap().unwrap().path();
    let segs = d.join("segments.tsv");
    ok(&["predict", "--ckpt", p(&run.join("model.ckpt")), "--wav", p(&wav), "--out", p(&segs)]);
    let tsv = std::fs::read_to_string(&segs).unwrap();
    assert_eq!(tsv.lines().next().unwrap(), "clip_id\tstart\tend\tlabel\tconfidence");

    // a multiclass model cannot be scored as a detector
    let out = apesed(&[
        "transfer", "--ckpt", p(&run.join("model.ckpt")), "--manifest", p(&manifest),
        "--split", p(&split), "--out", p(&d.join("t.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"]["kind"], "ClassArityMismatch");
}
