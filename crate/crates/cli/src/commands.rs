use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use repacc_core::battery::Battery;
use repacc_core::corpus::HeldoutText;
use repacc_core::digest::to_pretty_json;
use repacc_core::fixtures::{GradientTable, SHIPPED_GRADIENT_CSV};
use repacc_core::pipeline::{
    asset_pool, build_battery, build_spec, collect_cells, judge_records, subject_assets, subject_contexts, summarize,
    toy_sources, SubjectSource,
};
use repacc_core::prompts::PromptPack;
use repacc_core::providers::{Client, ToyProvider};
use repacc_core::report::{gradient_report, study_report, Report};
use repacc_core::runner::{run_matrix, MatrixOptions, RunLedger, SubjectAssets};
use repacc_core::specdoc::{derange_fixed, derange_random, v1_table};
use repacc_core::stats::{length_score_correlation, refusal_rate, LengthScore, RefusalMode, RefusalPatterns};
use repacc_core::{Error, Result};

use crate::config::{load_manifest, resolve, Manifest, ManifestEntry, Overrides, RunConfig};

/// Print to stdout; a closed pipe is not an error.
fn say(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

fn provider(cfg: &RunConfig) -> Result<Client> {
    match cfg.provider.as_str() {
        "toy" => Client::deterministic(Arc::new(ToyProvider::new("toy-model"))),
        other => Err(Error::invalid(format!("unknown provider binding `{other}`"))),
    }
}

/// One toy judge per panel id; offsets spread their leniency.
fn judges(cfg: &RunConfig) -> Result<Vec<Client>> {
    const OFFSETS: [i32; 5] = [0, -1, 1, -2, 2];
    cfg.study
        .panel
        .all_judges()
        .enumerate()
        .map(|(i, id)| Client::deterministic(Arc::new(ToyProvider::new(id).with_judge_offset(OFFSETS[i % OFFSETS.len()]))))
        .collect()
}

fn selected(sources: Vec<SubjectSource>, only: &[String]) -> Result<Vec<SubjectSource>> {
    if only.is_empty() {
        return Ok(sources);
    }
    let picked: Vec<_> = sources.into_iter().filter(|s| only.contains(&s.subject_id)).collect();
    if picked.len() != only.len() {
        return Err(Error::invalid(format!("unknown subject among {only:?}")));
    }
    Ok(picked)
}

fn assets_dir(cfg: &RunConfig, workdir: &Path) -> PathBuf {
    cfg.run_dir(workdir).join("assets")
}

fn read_upstream(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|_| Error::MissingUpstream(format!("{what} ({}); run the earlier stage first", path.display())))
}

fn load_heldout(cfg: &RunConfig, workdir: &Path, subject: &str) -> Result<HeldoutText> {
    let p = assets_dir(cfg, workdir).join(subject).join("heldout.json");
    Ok(serde_json::from_str(&read_upstream(&p, "held-out text")?)?)
}

fn load_battery(cfg: &RunConfig, workdir: &Path, subject: &str, heldout: &HeldoutText) -> Result<Battery> {
    let p = assets_dir(cfg, workdir).join(subject).join("battery.json");
    Battery::load(&read_upstream(&p, "battery")?, Some(heldout))
}

struct Loaded {
    sources: Vec<SubjectSource>,
    heldouts: Vec<HeldoutText>,
    batteries: Vec<Battery>,
}

fn load_batteries(cfg: &RunConfig, workdir: &Path) -> Result<Loaded> {
    let sources = cfg.subjects()?;
    let mut heldouts = Vec::new();
    let mut batteries = Vec::new();
    for s in &sources {
        let h = load_heldout(cfg, workdir, &s.subject_id)?;
        batteries.push(load_battery(cfg, workdir, &s.subject_id, &h)?);
        heldouts.push(h);
    }
    Ok(Loaded {
        sources,
        heldouts,
        batteries,
    })
}

pub fn init_toy(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut subjects = Vec::new();
    for s in toy_sources() {
        let file = format!("{}.txt", s.subject_id);
        std::fs::write(dir.join(&file), &s.raw_text)?;
        subjects.push(ManifestEntry {
            subject_id: s.subject_id,
            name: s.name,
            source_title: s.source_title,
            aliases: s.aliases,
            corpus: file.into(),
        });
    }
    let path = dir.join("subjects.json");
    std::fs::write(&path, to_pretty_json(&Manifest { subjects })?)?;
    say(&path.display().to_string());
    Ok(())
}

pub fn pipeline(workdir: &Path, run_id: &str, o: &Overrides, only: &[String]) -> Result<()> {
    // read every corpus before anything is written
    if let Some(p) = &o.subjects_manifest {
        load_manifest(p)?;
    } else if !workdir.join(run_id).join(crate::config::LOCK_FILE).exists() {
        return Err(Error::MissingUpstream("no subject manifest; pass --subjects".into()));
    }
    let cfg = resolve(workdir, run_id, o)?;
    let sources = selected(cfg.subjects()?, only)?;
    let client = provider(&cfg)?;
    let prompts = PromptPack::default();
    let dir = assets_dir(&cfg, workdir);
    let mut out = Vec::new();
    for s in &sources {
        let a = build_spec(s, &cfg.study, &client, &prompts, &dir)?;
        std::fs::write(dir.join(&s.subject_id).join("assets.json"), to_pretty_json(&subject_assets(s, &a))?)?;
        out.push(json!({
            "subject_id": s.subject_id,
            "facts": a.facts.facts.len(),
            "spec": a.manifest,
        }));
    }
    say(&to_pretty_json(&out)?);
    Ok(())
}

pub fn battery(workdir: &Path, run_id: &str, o: &Overrides, only: &[String]) -> Result<()> {
    let cfg = resolve(workdir, run_id, o)?;
    let sources = selected(cfg.subjects()?, only)?;
    let client = provider(&cfg)?;
    let dir = assets_dir(&cfg, workdir);
    let mut out = Vec::new();
    for s in &sources {
        let heldout = load_heldout(&cfg, workdir, &s.subject_id)?;
        let b = build_battery(&heldout, &cfg.study, &client, &PromptPack::default(), &dir)?;
        out.push(json!({
            "subject_id": s.subject_id,
            "questions": b.battery.questions().len(),
            "checksum": b.battery.checksum(),
            "dropped_items": b.dropped_items,
        }));
    }
    say(&to_pretty_json(&out)?);
    Ok(())
}

pub fn run(workdir: &Path, run_id: &str, o: &Overrides, resume: bool, max_cells: Option<usize>) -> Result<()> {
    let cfg = resolve(workdir, run_id, o)?;
    let loaded = load_batteries(&cfg, workdir)?;
    let mut assets = Vec::new();
    for s in &loaded.sources {
        let p = assets_dir(&cfg, workdir).join(&s.subject_id).join("assets.json");
        let a: SubjectAssets = serde_json::from_str(&read_upstream(&p, "subject assets")?)?;
        assets.push(a);
    }
    let pool = asset_pool(assets, cfg.study.seed_derangement)?;
    let run_dir = cfg.run_dir(workdir);
    std::fs::write(run_dir.join("derangements.json"), to_pretty_json(&pool.derangements)?)?;
    let ledger = run_matrix(
        workdir,
        run_id,
        &loaded.batteries,
        &cfg.study.conditions,
        &pool,
        &provider(&cfg)?,
        &MatrixOptions {
            resume,
            max_cells,
            budget: cfg.study.budget,
        },
    )?;
    std::fs::write(run_dir.join("ledger.json"), to_pretty_json(&ledger)?)?;
    say(&to_pretty_json(&ledger)?);
    Ok(())
}

pub fn judge(workdir: &Path, run_id: &str, o: &Overrides) -> Result<()> {
    let cfg = resolve(workdir, run_id, o)?;
    let loaded = load_batteries(&cfg, workdir)?;
    let heldouts: Vec<&HeldoutText> = loaded.heldouts.iter().collect();
    let cells = collect_cells(workdir, run_id, &loaded.batteries, &heldouts, &cfg.study.conditions, cfg.study.freeze.leak_ngram)?;
    if cells.records.is_empty() {
        return Err(Error::MissingUpstream("no response cells; run `repacc run` first".into()));
    }
    let run_dir = cfg.run_dir(workdir);
    let cube = judge_records(&cells.records, &loaded.batteries, &subject_contexts(&loaded.sources), &judges(&cfg)?, &cfg.study.panel, &run_dir)?;
    std::fs::write(run_dir.join("isolation.json"), to_pretty_json(&cells.isolation)?)?;
    say(&to_pretty_json(&json!({
        "scores": cube.n_scores(),
        "absences": cube.absences.len(),
        "isolation_clean": cells.isolation.is_clean(),
    }))?);
    Ok(())
}

fn emit(report: &Report, dir: Option<&Path>, json: bool) -> Result<()> {
    let text = if json { report.to_json()? } else { report.to_markdown() };
    if let Some(d) = dir {
        std::fs::write(d.join(if json { "report.json" } else { "report.md" }), &text)?;
    }
    say(&text);
    Ok(())
}

pub fn stats_fixture(workdir: &Path, run_id: Option<&str>, o: &Overrides, json: bool) -> Result<()> {
    let (stats, dir) = match run_id {
        Some(id) => {
            let cfg = resolve(workdir, id, o)?;
            (cfg.stats, Some(cfg.run_dir(workdir)))
        }
        None => {
            let mut s = repacc_core::report::GradientConfig::default();
            s.seed_bootstrap = o.seed_bootstrap.unwrap_or(s.seed_bootstrap);
            s.seed_permutation = o.seed_permutation.unwrap_or(s.seed_permutation);
            (s, None)
        }
    };
    let report = gradient_report(&GradientTable::shipped(), SHIPPED_GRADIENT_CSV, &stats)?;
    emit(&report, dir.as_deref(), json)
}

pub fn stats_run(workdir: &Path, run_id: &str, o: &Overrides, json: bool) -> Result<()> {
    let cfg = resolve(workdir, run_id, o)?;
    let loaded = load_batteries(&cfg, workdir)?;
    let run_dir = cfg.run_dir(workdir);
    let cube = serde_json::from_str(&read_upstream(&run_dir.join("score_cube.json"), "score cube")?)?;
    let ledger: RunLedger = serde_json::from_str(&read_upstream(&run_dir.join("ledger.json"), "run ledger")?)?;
    let heldouts: Vec<&HeldoutText> = loaded.heldouts.iter().collect();
    let cells = collect_cells(workdir, run_id, &loaded.batteries, &heldouts, &cfg.study.conditions, cfg.study.freeze.leak_ngram)?;
    let digest = repacc_core::digest::canonical_digest(&cfg, repacc_core::digest::ChecksumAlgorithm::Sha256)?;
    let summary = summarize(run_id, &cfg.study.conditions, digest, &cube, &loaded.batteries, &cells.records, cells.isolation, ledger)?;
    let mut report = study_report(&summary, &cfg)?;
    for b in &loaded.batteries {
        report.input(&format!("battery.{}", b.subject_id()), b.checksum().unwrap_or_default());
    }
    emit(&report, Some(&run_dir), json)
}

pub fn derange(subjects: &[String], v1: bool, seed: u64) -> Result<()> {
    let map = if v1 { derange_fixed(subjects, &v1_table())? } else { derange_random(subjects, seed)? };
    say(&to_pretty_json(&map)?);
    Ok(())
}

pub fn audit(workdir: &Path, run_id: &str, o: &Overrides, strict: bool) -> Result<()> {
    let cfg = resolve(workdir, run_id, o)?;
    let loaded = load_batteries(&cfg, workdir)?;
    let heldouts: Vec<&HeldoutText> = loaded.heldouts.iter().collect();
    let cells = collect_cells(workdir, run_id, &loaded.batteries, &heldouts, &cfg.study.conditions, cfg.study.freeze.leak_ngram)?;
    let mode = if strict { RefusalMode::Strict } else { RefusalMode::Broad };
    let patterns = RefusalPatterns::default();

    let mut by_condition: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for r in cells.records.iter().filter(|r| !r.call.is_failed()) {
        by_condition.entry(r.condition.to_string()).or_default().push(&r.response_text);
    }
    let refusals: BTreeMap<&String, f64> = by_condition
        .iter()
        .map(|(c, texts)| (c, refusal_rate(texts.iter().copied(), mode, &patterns)))
        .collect();

    let cube_path = cfg.run_dir(workdir).join("score_cube.json");
    let length = if cube_path.exists() {
        let cube: repacc_core::judging::ScoreCube = serde_json::from_str(&std::fs::read_to_string(&cube_path)?)?;
        let items: Vec<LengthScore> = cells
            .records
            .iter()
            .filter_map(|r| {
                let scores = cube.scores.get(&r.subject_id)?.get(&r.condition)?.get(&r.qid)?;
                let panel: Vec<f64> = cfg.study.panel.primary.iter().filter_map(|j| scores.get(j)).map(|&s| f64::from(s)).collect();
                (!panel.is_empty()).then(|| LengthScore {
                    group: r.condition.to_string(),
                    response_chars: r.response_text.chars().count(),
                    panel_mean: panel.iter().sum::<f64>() / panel.len() as f64,
                })
            })
            .collect();
        let mut out = BTreeMap::new();
        for c in by_condition.keys() {
            let group: Vec<LengthScore> = items.iter().filter(|i| &i.group == c).cloned().collect();
            let v = match length_score_correlation(&group) {
                Ok(m) => serde_json::to_value(&m[c])?,
                Err(e) => json!({ "skipped": e.to_string() }),
            };
            out.insert(c.clone(), v);
        }
        Some(out)
    } else {
        None
    };

    say(&to_pretty_json(&json!({
        "refusal_mode": mode,
        "refusal_patterns_version": patterns.version,
        "refusal_rates": refusals,
        "length_score": length,
        "isolation": cells.isolation,
    }))?);
    Ok(())
}
