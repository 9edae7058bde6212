use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn repacc(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repacc"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn toy(dir: &Path) -> String {
    ok(repacc(dir, &["init-toy", dir.join("toy").to_str().unwrap()]));
    dir.join("toy/subjects.json").to_str().unwrap().to_string()
}

fn full_run(work: &Path, manifest: &str) -> Value {
    ok(repacc(work, &["pipeline", "--run-id", "r", "--subjects", manifest]));
    ok(repacc(work, &["battery", "--run-id", "r"]));
    ok(repacc(work, &["run", "--run-id", "r"]));
    ok(repacc(work, &["judge", "--run-id", "r"]));
    serde_json::from_str(&ok(repacc(work, &["stats", "--run-id", "r", "--report", "json"]))).unwrap()
}

#[test]
fn stages_chain_and_reports_reproduce() {
    let base = tempfile::tempdir().unwrap();
    let manifest = toy(base.path());
    let a = full_run(&base.path().join("w1"), &manifest);
    let b = full_run(&base.path().join("w2"), &manifest);
    assert_eq!(a, b);
    assert_eq!(a["values"]["mean.marlow.C5"], 1.0);
    assert!(a["values"]["delta.C4a"].as_f64().unwrap() > 0.0);
    assert_eq!(a["values"]["isolation.overlaps"], 0.0);
    assert!(a["config_digest"].as_str().unwrap().len() == 64);
    let md = std::fs::read_to_string(base.path().join("w1/r/report.json")).unwrap();
    assert_eq!(serde_json::from_str::<Value>(&md).unwrap(), a);
}

#[test]
fn resume_completes_only_remaining_cells() {
    let base = tempfile::tempdir().unwrap();
    let manifest = toy(base.path());
    let w = base.path().join("w");
    ok(repacc(&w, &["pipeline", "--run-id", "r", "--subjects", &manifest]));
    ok(repacc(&w, &["battery", "--run-id", "r"]));
    let first: Value = serde_json::from_str(&ok(repacc(&w, &["run", "--run-id", "r", "--max-cells", "4"]))).unwrap();
    let status = |v: &Value, s: &str| v["cells"].as_array().unwrap().iter().filter(|c| c["status"] == s).count();
    assert_eq!((status(&first, "completed"), status(&first, "not_run")), (4, 6));
    let second: Value = serde_json::from_str(&ok(repacc(&w, &["run", "--run-id", "r", "--resume"]))).unwrap();
    assert_eq!((status(&second, "resumed"), status(&second, "completed")), (4, 6));
}

#[test]
fn missing_corpus_writes_nothing() {
    let base = tempfile::tempdir().unwrap();
    let manifest = toy(base.path());
    std::fs::remove_file(base.path().join("toy/okafor.txt")).unwrap();
    let w = base.path().join("w");
    let out = repacc(&w, &["pipeline", "--run-id", "r", "--subjects", &manifest]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("okafor.txt"));
    assert!(!w.exists());
}

#[test]
fn pipeline_rerun_keeps_digests() {
    let base = tempfile::tempdir().unwrap();
    let manifest = toy(base.path());
    let w = base.path().join("w");
    let a = ok(repacc(&w, &["pipeline", "--run-id", "r", "--subjects", &manifest]));
    let b = ok(repacc(&w, &["pipeline", "--run-id", "r"]));
    assert_eq!(a, b);
}

#[test]
fn stale_battery_is_refused() {
    let base = tempfile::tempdir().unwrap();
    let manifest = toy(base.path());
    let w = base.path().join("w");
    ok(repacc(&w, &["pipeline", "--run-id", "r", "--subjects", &manifest, "--conditions", "C5,C4a"]));
    ok(repacc(&w, &["battery", "--run-id", "r"]));
    ok(repacc(&w, &["run", "--run-id", "r"]));
    // responses now claim a different frozen battery
    let cell = w.join("r/marlow/C4a.json");
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cell).unwrap()).unwrap();
    v["manifest"]["battery_checksum"] = "0123456789abcdef0123456789abcdef".into();
    std::fs::write(&cell, v.to_string()).unwrap();
    let out = repacc(&w, &["judge", "--run-id", "r"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn tampered_battery_file_is_refused() {
    let base = tempfile::tempdir().unwrap();
    let manifest = toy(base.path());
    let w = base.path().join("w");
    ok(repacc(&w, &["pipeline", "--run-id", "r", "--subjects", &manifest]));
    ok(repacc(&w, &["battery", "--run-id", "r"]));
    let path = w.join("r/assets/okafor/battery.json");
    let text = std::fs::read_to_string(&path).unwrap().replacen("Question ", "Query ", 1);
    std::fs::write(&path, text).unwrap();
    assert_eq!(code(&repacc(&w, &["run", "--run-id", "r"])), 4);
}

#[test]
fn locked_config_rejects_changes() {
    let base = tempfile::tempdir().unwrap();
    let manifest = toy(base.path());
    let w = base.path().join("w");
    ok(repacc(&w, &["pipeline", "--run-id", "r", "--subjects", &manifest, "--seed-derangement", "5"]));
    assert_eq!(code(&repacc(&w, &["battery", "--run-id", "r", "--seed-derangement", "6"])), 2);
    ok(repacc(&w, &["battery", "--run-id", "r", "--seed-derangement", "5"]));
}

#[test]
fn upstream_missing_is_precondition_failure() {
    let base = tempfile::tempdir().unwrap();
    let manifest = toy(base.path());
    let w = base.path().join("w");
    ok(repacc(&w, &["pipeline", "--run-id", "r", "--subjects", &manifest]));
    let out = repacc(&w, &["judge", "--run-id", "r"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn fixture_stats_headline() {
    let base = tempfile::tempdir().unwrap();
    let v: Value = serde_json::from_str(&ok(repacc(base.path(), &["stats", "--fixture", "paper-table-d1", "--report", "json"]))).unwrap();
    assert_eq!(v["values"]["wilcoxon.c4a_vs_c5.W"], 11.0);
    assert!((v["values"]["gradient.slope"].as_f64().unwrap() + 0.96).abs() < 0.02);
    let md = ok(repacc(base.path(), &["stats", "--fixture", "paper-table-d1"]));
    assert!(md.contains("`bootstrap.ci_lo`"));
}

#[test]
fn derangement_has_no_fixed_points() {
    let base = tempfile::tempdir().unwrap();
    let v: Value = serde_json::from_str(&ok(repacc(base.path(), &["derange", "--subjects", "a,b,c,d,e", "--seed", "9"]))).unwrap();
    for (k, t) in v["pairs"].as_object().unwrap() {
        assert_ne!(k, t.as_str().unwrap());
    }
    assert_eq!(code(&repacc(base.path(), &["derange", "--subjects", "a"])), 2);
}

#[test]
fn audit_reports_rates() {
    let base = tempfile::tempdir().unwrap();
    let manifest = toy(base.path());
    let w = base.path().join("w");
    full_run(&w, &manifest);
    let v: Value = serde_json::from_str(&ok(repacc(&w, &["audit", "--run-id", "r", "--mode", "strict"]))).unwrap();
    assert_eq!(v["refusal_rates"]["C5"], 1.0);
    assert_eq!(v["refusal_rates"]["C4a"], 0.0);
    assert!(v["isolation"]["overlaps"].as_array().unwrap().is_empty());
}
