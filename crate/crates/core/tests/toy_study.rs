use repacc_core::pipeline::{run_study, toy_clients, toy_config, toy_sources, StudyClients, StudyOutcome};
use repacc_core::prompts::PromptPack;
use repacc_core::runner::CellStatus;

fn study(dir: &std::path::Path) -> StudyOutcome {
    let (main, judges) = toy_clients();
    let clients = StudyClients {
        author: &main,
        generator: &main,
        responder: &main,
        judges: &judges,
    };
    run_study(&toy_sources(), &toy_config("golden"), &clients, &PromptPack::default(), dir).unwrap()
}

#[test]
fn golden_artifact_digests() {
    let dir = tempfile::tempdir().unwrap();
    let out = study(dir.path());
    let got: Vec<(String, String, String)> = out
        .specs
        .iter()
        .zip(&out.batteries)
        .map(|(s, b)| (s.subject_id.clone(), s.manifest.served_sha256.clone(), b.battery.checksum().unwrap().to_string()))
        .collect();
    assert_eq!(got, GOLDEN.iter().map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string())).collect::<Vec<_>>());
}

/// (subject, served spec sha256, battery md5) from the bundled toy corpus.
const GOLDEN: &[(&str, &str, &str)] = &[
    ("marlow", "fddb770a54b1f5b3e6c97333698fe6abdd34f298b41a67911d0e35ea5e0be1c2", "74256c6bba894f6c03b3fd4a6acaead5"),
    ("okafor", "9718420891a5accc799318dbd40f7a6dac0b4fbf69439f6abd739dee94690ecc", "6d224bf3caf8ee13a389e14b970ed6f1"),
];

#[test]
fn every_cell_completes_and_spec_lifts_scores() {
    let dir = tempfile::tempdir().unwrap();
    let out = study(dir.path());
    assert!(out.summary.ledger.cells.iter().all(|c| c.status == CellStatus::Completed));
    for d in &out.summary.deltas {
        assert!(d.values().iter().all(|&v| v > 0.0), "{} did not improve on C5", d.condition_a);
    }
    // a subject's own spec beats someone else's
    let own = out.summary.deltas.iter().find(|d| d.condition_a.to_string() == "C2a").unwrap();
    let wrong = out.summary.deltas.iter().find(|d| d.condition_a.to_string() == "C2c_v2").unwrap();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(own.values()) > mean(wrong.values()));
    assert_eq!(out.summary.refusal_rates["C5"], 1.0);
}
