use std::path::Path;
use std::process::{Command, Output};

use nearmiss_core::pipeline::load_manifest;

fn nearmiss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nearmiss"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL_CONFIG: &str = "[encode]\npca_dim = 8\ncodebook_size = 4\nmax_fit_descriptors = 2000\n";

#[test]
fn full_pipeline_runs_stage_by_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (data, store, enc, model, report) = (t.join("data"), t.join("store"), t.join("enc"), t.join("model.json"), t.join("report"));
    let config = t.join("config.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let manifest = data.join("manifest.jsonl");
    let encodings = t.join("encodings.jsonl");

    ok(&nearmiss(&["gen-data", "--preset", "tiny", "--seed", "3", "--out", arg(&data)]));
    assert_eq!(load_manifest(&manifest).unwrap().len(), 21);
    ok(&nearmiss(&["extract", "--manifest", arg(&manifest), "--config", arg(&config), "--out", arg(&store)]));
    assert!(store.join("extract_report.json").is_file());
    ok(&nearmiss(&[
        "codebook", "--manifest", arg(&manifest), "--config", arg(&config), "--store", arg(&store), "--out", arg(&enc),
    ]));
    assert!(enc.join("encoder.json").is_file());
    ok(&nearmiss(&[
        "encode", "--manifest", arg(&manifest), "--store", arg(&store), "--encoder", arg(&enc), "--out", arg(&encodings),
    ]));
    assert_eq!(std::fs::read_to_string(&encodings).unwrap().lines().count(), 21);
    ok(&nearmiss(&[
        "train", "--encodings", arg(&encodings), "--config", arg(&config), "--task", "detection", "--seed", "5", "--out", arg(&model),
    ]));
    let eval = nearmiss(&["eval", "--encodings", arg(&encodings), "--model", arg(&model), "--out", arg(&report)]);
    ok(&eval);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    let acc = summary["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(report.join("report.txt").is_file());
    assert!(String::from_utf8_lossy(&eval.stdout).contains("detection"));
}

#[test]
fn validation_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let missing = nearmiss(&["extract", "--manifest", arg(&t.join("nope.jsonl")), "--out", arg(&t.join("s"))]);
    assert_eq!(missing.status.code(), Some(1));

    let bad = t.join("bad.toml");
    std::fs::write(&bad, "[encode]\nno_such_key = 3\n").unwrap();
    let manifest = t.join("m.jsonl");
    std::fs::write(&manifest, "").unwrap();
    let out = nearmiss(&["extract", "--manifest", arg(&manifest), "--config", arg(&bad), "--out", arg(&t.join("s"))]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(&manifest, "{\"clip_id\": \"a\"}\n").unwrap();
    let out = nearmiss(&["extract", "--manifest", arg(&manifest), "--out", arg(&t.join("s"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn failed_clips_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = t.join("data");
    ok(&nearmiss(&["gen-data", "--preset", "tiny", "--seed", "4", "--out", arg(&data)]));
    let manifest = data.join("manifest.jsonl");
    let records = load_manifest(&manifest).unwrap();
    std::fs::remove_dir_all(&records[0].frame_dir).unwrap();

    // one failure in 21 clips is within the default budget: partial output
    let store = t.join("store");
    let out = nearmiss(&["extract", "--manifest", arg(&manifest), "--channels", "off", "--out", arg(&store)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(store.join("extract_report.json").is_file());

    // three exceed it
    for r in &records[1..3] {
        std::fs::remove_dir_all(&r.frame_dir).unwrap();
    }
    let out = nearmiss(&["extract", "--manifest", arg(&manifest), "--channels", "off", "--out", arg(&store)]);
    assert_eq!(out.status.code(), Some(2));
}
