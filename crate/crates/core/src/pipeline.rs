//! Stage orchestration: corpus to spec, held-out text to frozen battery,
//! then the condition matrix, the judge panel and the summary statistics.
//! Every artifact is written under one output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::battery::{dedup_and_cap, freeze, generate_battery, Battery, BatteryConfig, CategoryTargets, FreezeOptions};
use crate::corpus::{import_corpus, split_corpus, training_text, HeldoutText, ImportConfig, LeakReport, SplitOptions};
use crate::digest::{canonical_digest, to_pretty_json, ChecksumAlgorithm};
use crate::error::{Error, Result};
use crate::factstore::{extract_facts, training_passages, FactSnapshot, FactStore, Vocabulary};
use crate::judging::{run_panel, PanelDef, PanelOptions, ScoreCube, SubjectContext};
use crate::prompts::PromptPack;
use crate::providers::Client;
use crate::runner::{
    cell_path, isolation_scan, read_cell, run_matrix, AssetPool, ConditionId, ContextBudget, IsolationReport, MatrixOptions,
    ResponseRecord, RunLedger, SubjectAssets,
};
use crate::specdoc::{
    assemble_spec, author_layers, compose_brief, derange_random, format_fact_lines, identity_sample,
    persist_spec, SpecDocument, SpecManifest,
};
use crate::stats::{
    aggregate, anchor_transitions, delta, krippendorff_alpha_ordinal, paired_question_means, refusal_rate,
    AggregateOptions, AlphaConvention, DeltaSeries, PanelChoice, RefusalMode, RefusalPatterns, SubjectConditionMean,
    TestResult, TransitionTable,
};

/// A subject's raw source and how to refer to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSource {
    pub subject_id: String,
    pub name: String,
    pub source_title: String,
    /// Extra names scrubbed when the spec is anonymized.
    #[serde(default)]
    pub aliases: Vec<String>,
    pub raw_text: String,
}

impl SubjectSource {
    fn scrub_names(&self) -> Vec<String> {
        let mut v = vec![self.name.clone()];
        v.extend(self.aliases.iter().cloned());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub run_id: String,
    pub conditions: Vec<ConditionId>,
    pub split: SplitOptions,
    pub import: ImportConfig,
    pub battery: BatteryConfig,
    pub targets: CategoryTargets,
    pub freeze: FreezeOptions,
    pub identity_facts: usize,
    pub seed_derangement: u64,
    pub budget: Option<ContextBudget>,
    pub panel: PanelDef,
}

/// Everything needed to serve one subject, plus what it was built from.
#[derive(Debug, Clone)]
pub struct SpecArtifacts {
    pub subject_id: String,
    pub heldout: HeldoutText,
    pub training_text: String,
    pub facts: FactSnapshot,
    pub spec: SpecDocument,
    pub anonymized_spec: SpecDocument,
    pub manifest: SpecManifest,
    pub embedded_facts: usize,
}

/// Import → split → extract → embed → author → compose, writing the fact
/// journal, snapshot and spec parts under `dir/<subject>/`.
pub fn build_spec(src: &SubjectSource, cfg: &StudyConfig, author: &Client, prompts: &PromptPack, dir: &Path) -> Result<SpecArtifacts> {
    let corpus = import_corpus(&src.raw_text, &src.subject_id, &cfg.import).map_err(|e| e.in_stage("import"))?;
    let split = split_corpus(&corpus, cfg.split).map_err(|e| e.in_stage("split"))?;
    let heldout = HeldoutText::from_split(&corpus, &split);
    let training = training_text(&corpus, &split);

    let mut store = FactStore::new(&src.subject_id, Vocabulary::default());
    let passages = training_passages(&corpus, &split);
    store.add_passages(&passages);
    let extraction = extract_facts(&store, &passages, author, prompts).map_err(|e| e.in_stage("extract"))?;
    for op in extraction.ops {
        store.apply(op).map_err(|e| e.in_stage("extract"))?;
    }

    let claims: Vec<String> = store.active_facts().iter().map(|f| f.claim()).collect();
    let embedded_facts = if claims.is_empty() {
        0
    } else {
        author.embed(&claims, true).map_err(|e| e.in_stage("embed"))?.len()
    };

    let active: Vec<_> = store.active_facts().into_iter().cloned().collect();
    let active_refs: Vec<_> = active.iter().collect();
    let layers = author_layers(&src.name, &active_refs, author, prompts).map_err(|e| e.in_stage("author"))?;
    for layer in layers.iter() {
        for (item, ids) in &layer.provenance {
            store.link_pattern(item, &format!("{} {item}", layer.kind.as_str()), ids).map_err(|e| e.in_stage("author"))?;
        }
    }
    let identity = identity_sample(&active_refs, cfg.identity_facts);
    let brief = compose_brief(&src.name, &layers, &identity, author, prompts).map_err(|e| e.in_stage("compose"))?;
    let spec = assemble_spec(&src.subject_id, &layers, &brief, None);
    let anonymized_spec = assemble_spec(&src.subject_id, &layers, &brief, Some(&src.scrub_names()));

    let sdir = dir.join(&src.subject_id);
    std::fs::create_dir_all(&sdir)?;
    std::fs::write(sdir.join("split.json"), to_pretty_json(&split)?)?;
    std::fs::write(sdir.join("facts.journal.jsonl"), store.journal_jsonl()?)?;
    std::fs::write(sdir.join("facts.snapshot.json"), to_pretty_json(&store.snapshot())?)?;
    std::fs::write(sdir.join("heldout.json"), to_pretty_json(&heldout)?)?;
    let manifest = persist_spec(&sdir.join("spec"), &spec, &brief)?;

    Ok(SpecArtifacts {
        subject_id: src.subject_id.clone(),
        heldout,
        training_text: training,
        facts: store.snapshot(),
        spec,
        anonymized_spec,
        manifest,
        embedded_facts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryArtifacts {
    pub battery: Battery,
    pub leak_report: LeakReport,
    pub dropped_items: usize,
}

/// Generate, dedup/cap and freeze a battery; written to `dir/<subject>/battery.json`.
pub fn build_battery(heldout: &HeldoutText, cfg: &StudyConfig, generator: &Client, prompts: &PromptPack, dir: &Path) -> Result<BatteryArtifacts> {
    let generation = generate_battery(heldout, generator, &cfg.battery, prompts).map_err(|e| e.in_stage("battery"))?;
    let (capped, _) = dedup_and_cap(&generation.battery, &cfg.targets).map_err(|e| e.in_stage("battery"))?;
    let (battery, leak_report) = freeze(capped, heldout, cfg.freeze).map_err(|e| e.in_stage("freeze"))?;
    let sdir = dir.join(&heldout.subject_id);
    std::fs::create_dir_all(&sdir)?;
    std::fs::write(sdir.join("battery.json"), battery.to_json()?)?;
    Ok(BatteryArtifacts {
        battery,
        leak_report,
        dropped_items: generation.dropped.len(),
    })
}

/// Clients for each role. Judges are matched to the panel by provider id.
pub struct StudyClients<'a> {
    pub author: &'a Client,
    pub generator: &'a Client,
    pub responder: &'a Client,
    pub judges: &'a [Client],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub run_id: String,
    pub config_digest: String,
    pub means: Vec<SubjectConditionMean>,
    pub deltas: Vec<DeltaSeries>,
    pub transitions: BTreeMap<String, TransitionTable>,
    pub agreement: Option<TestResult>,
    pub refusal_rates: BTreeMap<String, f64>,
    pub isolation: IsolationReport,
    pub ledger: RunLedger,
}

pub struct StudyOutcome {
    pub summary: StudySummary,
    pub cube: ScoreCube,
    pub specs: Vec<SpecArtifacts>,
    pub batteries: Vec<BatteryArtifacts>,
    pub run_dir: PathBuf,
}

/// What a response provider may be served for one subject.
pub fn subject_assets(src: &SubjectSource, a: &SpecArtifacts) -> SubjectAssets {
    let facts: Vec<_> = a.facts.facts.iter().filter(|f| f.is_active()).collect();
    SubjectAssets {
        subject_id: src.subject_id.clone(),
        name: src.name.clone(),
        source_title: src.source_title.clone(),
        spec: Some(a.spec.served_form()),
        anonymized_spec: Some(a.anonymized_spec.served_form()),
        facts: Some(format_fact_lines(facts)),
        training_text: Some(a.training_text.clone()),
        retrieval: None,
        native_retrieval: None,
    }
}

/// Assets keyed by subject plus a seeded derangement when there are at
/// least two subjects.
pub fn asset_pool(assets: impl IntoIterator<Item = SubjectAssets>, seed: u64) -> Result<AssetPool> {
    let mut pool = AssetPool::default();
    for a in assets {
        pool.subjects.insert(a.subject_id.clone(), a);
    }
    let ids: Vec<String> = pool.subjects.keys().cloned().collect();
    if ids.len() >= 2 {
        pool.derangements.push(derange_random(&ids, seed)?);
    }
    Ok(pool)
}

/// Response cells read back from disk, checked against the battery they
/// were generated from, with an isolation scan of every served context.
pub struct CollectedCells {
    pub records: Vec<ResponseRecord>,
    pub isolation: IsolationReport,
}

pub fn collect_cells(
    root: &Path,
    run_id: &str,
    batteries: &[Battery],
    heldouts: &[&HeldoutText],
    conditions: &[ConditionId],
    leak_ngram: usize,
) -> Result<CollectedCells> {
    let mut records = Vec::new();
    let mut isolation = IsolationReport::default();
    for (b, heldout) in batteries.iter().zip(heldouts) {
        let checksum = b.checksum().ok_or(Error::NotFrozen)?;
        let mut blocks = Vec::new();
        for &c in conditions {
            let path = cell_path(root, run_id, b.subject_id(), c);
            if !path.exists() {
                continue;
            }
            let cell = read_cell(&path)?;
            if cell.manifest.battery_checksum != checksum {
                return Err(Error::ChecksumMismatch {
                    expected: checksum.into(),
                    found: cell.manifest.battery_checksum,
                });
            }
            for (k, block) in cell.contexts {
                blocks.push((format!("{}/{c}/{k}", b.subject_id()), block));
            }
            records.extend(cell.records);
        }
        let scan = isolation_scan(blocks.iter().map(|(l, b)| (l.clone(), b)), heldout, Some(leak_ngram));
        isolation.blocks_scanned += scan.blocks_scanned;
        isolation.heldout_segments.extend(scan.heldout_segments);
        isolation.overlaps.extend(scan.overlaps);
    }
    Ok(CollectedCells { records, isolation })
}

/// Score every record with the panel and write per-cell judgments and the
/// score cube under `run_dir`.
pub fn judge_records(
    records: &[ResponseRecord],
    batteries: &[Battery],
    subjects: &BTreeMap<String, SubjectContext>,
    judges: &[Client],
    panel: &PanelDef,
    run_dir: &Path,
) -> Result<ScoreCube> {
    let spans: BTreeMap<(String, String), String> = batteries
        .iter()
        .flat_map(|b| b.questions().iter().map(|q| ((q.subject_id.clone(), q.qid.clone()), q.heldout_span.clone())))
        .collect();
    let outcome = run_panel(records, &spans, subjects, judges, panel, PanelOptions::default())?;
    let conditions: std::collections::BTreeSet<ConditionId> = records.iter().map(|r| r.condition).collect();
    let jdir = run_dir.join("judgments");
    for b in batteries {
        for &c in &conditions {
            let by_judge = outcome.judgments_by_judge(b.subject_id(), c);
            if by_judge.is_empty() {
                continue;
            }
            let d = jdir.join(b.subject_id());
            std::fs::create_dir_all(&d)?;
            std::fs::write(d.join(format!("{c}.json")), to_pretty_json(&by_judge)?)?;
        }
    }
    std::fs::write(run_dir.join("score_cube.json"), to_pretty_json(&outcome.cube)?)?;
    Ok(outcome.cube)
}

pub fn subject_contexts(sources: &[SubjectSource]) -> BTreeMap<String, SubjectContext> {
    sources
        .iter()
        .map(|s| {
            (
                s.subject_id.clone(),
                SubjectContext {
                    name: s.name.clone(),
                    source_title: s.source_title.clone(),
                },
            )
        })
        .collect()
}

/// Run the whole chain for `sources` and write everything under
/// `dir/<run_id>/`.
pub fn run_study(sources: &[SubjectSource], cfg: &StudyConfig, clients: &StudyClients<'_>, prompts: &PromptPack, dir: &Path) -> Result<StudyOutcome> {
    let run_dir = dir.join(&cfg.run_id);
    std::fs::create_dir_all(&run_dir)?;
    let config_digest = canonical_digest(cfg, ChecksumAlgorithm::Sha256)?;
    std::fs::write(run_dir.join("config.lock.json"), to_pretty_json(cfg)?)?;
    let assets_dir = run_dir.join("assets");

    let mut specs = Vec::new();
    let mut batteries = Vec::new();
    for src in sources {
        let a = build_spec(src, cfg, clients.author, prompts, &assets_dir)?;
        batteries.push(build_battery(&a.heldout, cfg, clients.generator, prompts, &assets_dir)?);
        specs.push(a);
    }
    let pool = asset_pool(sources.iter().zip(&specs).map(|(s, a)| subject_assets(s, a)), cfg.seed_derangement)?;
    std::fs::write(run_dir.join("derangements.json"), to_pretty_json(&pool.derangements)?)?;

    let frozen: Vec<Battery> = batteries.iter().map(|b| b.battery.clone()).collect();
    let ledger = run_matrix(
        dir,
        &cfg.run_id,
        &frozen,
        &cfg.conditions,
        &pool,
        clients.responder,
        &MatrixOptions {
            budget: cfg.budget,
            ..Default::default()
        },
    )
    .map_err(|e| e.in_stage("run"))?;

    // reload cells from disk, as a separate judge step would
    let heldouts: Vec<&HeldoutText> = specs.iter().map(|a| &a.heldout).collect();
    let cells = collect_cells(dir, &cfg.run_id, &frozen, &heldouts, &cfg.conditions, cfg.freeze.leak_ngram)
        .map_err(|e| e.in_stage("judge"))?;
    let cube = judge_records(&cells.records, &frozen, &subject_contexts(sources), clients.judges, &cfg.panel, &run_dir)
        .map_err(|e| e.in_stage("judge"))?;

    let summary = summarize(&cfg.run_id, &cfg.conditions, config_digest, &cube, &frozen, &cells.records, cells.isolation, ledger)
        .map_err(|e| e.in_stage("stats"))?;
    std::fs::write(run_dir.join("summary.json"), to_pretty_json(&summary)?)?;

    Ok(StudyOutcome {
        summary,
        cube,
        specs,
        batteries,
        run_dir,
    })
}

/// Panel means, deltas against C5, anchor crossings, panel agreement and
/// refusal rates for a judged run.
#[allow(clippy::too_many_arguments)]
pub fn summarize(
    run_id: &str,
    conditions: &[ConditionId],
    config_digest: String,
    cube: &ScoreCube,
    batteries: &[Battery],
    records: &[ResponseRecord],
    isolation: IsolationReport,
    ledger: RunLedger,
) -> Result<StudySummary> {
    let opts = AggregateOptions {
        panel: PanelChoice::Primary,
        include: Some(crate::stats::behavioral_filter(batteries)),
    };
    let means = aggregate(cube, &opts)?;
    let baseline: ConditionId = "C5".parse()?;
    let deltas: Vec<DeltaSeries> = conditions
        .iter()
        .filter(|&&c| c != baseline)
        .map(|&c| delta(&means, c, baseline))
        .collect();

    let mut transitions = BTreeMap::new();
    for &c in conditions.iter().filter(|&&c| c != baseline) {
        let pairs: Vec<(f64, f64)> = batteries
            .iter()
            .flat_map(|b| paired_question_means(cube, b.subject_id(), baseline, c, PanelChoice::Primary))
            .map(|(_, x, y)| (x, y))
            .collect();
        if !pairs.is_empty() {
            transitions.insert(c.to_string(), anchor_transitions(&pairs)?);
        }
    }

    // judges × every (subject, condition, qid) item
    let mut items: Vec<(String, ConditionId, String)> = Vec::new();
    for (s, by_c) in &cube.scores {
        for (c, by_q) in by_c {
            for q in by_q.keys() {
                items.push((s.clone(), *c, q.clone()));
            }
        }
    }
    let matrix: Vec<Vec<Option<u8>>> = cube
        .panel
        .primary
        .iter()
        .map(|j| items.iter().map(|(s, c, q)| cube.get(s, *c, q, j)).collect())
        .collect();
    let agreement = if matrix.len() >= 2 {
        krippendorff_alpha_ordinal(&matrix, AlphaConvention::PairableValues).ok()
    } else {
        None
    };

    let patterns = RefusalPatterns::default();
    let mut refusal_rates = BTreeMap::new();
    for &c in conditions {
        let texts: Vec<&str> = records
            .iter()
            .filter(|r| r.condition == c && !r.call.is_failed())
            .map(|r| r.response_text.as_str())
            .collect();
        if !texts.is_empty() {
            refusal_rates.insert(c.to_string(), refusal_rate(texts, RefusalMode::Broad, &patterns));
        }
    }

    Ok(StudySummary {
        run_id: run_id.to_string(),
        config_digest,
        means,
        deltas,
        transitions,
        agreement,
        refusal_rates,
        isolation,
        ledger,
    })
}

/// Two small synthetic memoirs that exercise every stage offline.
pub fn toy_sources() -> Vec<SubjectSource> {
    vec![
        SubjectSource {
            subject_id: "marlow".into(),
            name: "Agnes Marlow".into(),
            source_title: "A Ferrywoman's Reckoning".into(),
            aliases: vec!["Marlow".into(), "Agnes".into()],
            raw_text: include_str!("../data/toy/marlow.txt").into(),
        },
        SubjectSource {
            subject_id: "okafor".into(),
            name: "Tobias Okafor".into(),
            source_title: "Letters from the Salt Road".into(),
            aliases: vec!["Okafor".into(), "Tobias".into()],
            raw_text: include_str!("../data/toy/okafor.txt").into(),
        },
    ]
}

/// Configuration sized for the toy corpora.
pub fn toy_config(run_id: &str) -> StudyConfig {
    StudyConfig {
        run_id: run_id.into(),
        conditions: crate::runner::parse_conditions("C5,C2a,C2c_v2,C4,C4a").expect("static list"),
        split: SplitOptions::default(),
        import: ImportConfig::default(),
        battery: BatteryConfig {
            batches: 2,
            per_batch: 6,
            window_chars: 450,
        },
        targets: CategoryTargets::default(),
        freeze: FreezeOptions::default(),
        identity_facts: 8,
        seed_derangement: 7,
        budget: Some(ContextBudget { max_tokens: 200_000 }),
        panel: PanelDef::primary(&["toy-judge-a", "toy-judge-b", "toy-judge-c"]),
    }
}

/// Toy clients: one authoring/response provider and three judges that
/// disagree by a fixed offset.
pub fn toy_clients() -> (Client, Vec<Client>) {
    use crate::providers::ToyProvider;
    use std::sync::Arc;
    let main = Client::deterministic(Arc::new(ToyProvider::new("toy-model"))).expect("no credentials needed");
    let judges = [("toy-judge-a", 0), ("toy-judge-b", -1), ("toy-judge-c", 1)]
        .into_iter()
        .map(|(id, off)| Client::deterministic(Arc::new(ToyProvider::new(id).with_judge_offset(off))).expect("no credentials needed"))
        .collect();
    (main, judges)
}

/// Paths of every regular file under `dir`, relative and sorted.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(base: &Path, d: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in std::fs::read_dir(d)? {
            let p = e?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                out.push(p.strip_prefix(base).expect("under base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anon_check(a: &SpecArtifacts, src: &SubjectSource) {
        let served = a.anonymized_spec.served_form().to_lowercase();
        for n in src.scrub_names() {
            assert!(!served.contains(&n.to_lowercase()), "{n} survived anonymization");
        }
    }

    #[test]
    fn toy_study_runs() {
        let dir = tempfile::tempdir().unwrap();
        let (main, judges) = toy_clients();
        let clients = StudyClients {
            author: &main,
            generator: &main,
            responder: &main,
            judges: &judges,
        };
        let sources = toy_sources();
        let out = run_study(&sources, &toy_config("t"), &clients, &PromptPack::default(), dir.path()).unwrap();
        assert_eq!(out.summary.means.len(), 2 * 5);
        assert!(out.summary.isolation.is_clean(), "{:?}", out.summary.isolation);
        for (a, s) in out.specs.iter().zip(&sources) {
            assert!(a.facts.facts.len() >= 5);
            assert!(a.embedded_facts > 0);
            anon_check(a, s);
        }
        for b in &out.batteries {
            assert!(b.battery.questions().len() >= 5);
            assert!(b.leak_report.is_clean());
        }
    }

    #[test]
    fn reruns_are_byte_identical() {
        let (main, judges) = toy_clients();
        let clients = StudyClients {
            author: &main,
            generator: &main,
            responder: &main,
            judges: &judges,
        };
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            run_study(&toy_sources(), &toy_config("r"), &clients, &PromptPack::default(), d.path()).unwrap();
        }
        let files = list_files(dirs[0].path()).unwrap();
        assert_eq!(files, list_files(dirs[1].path()).unwrap());
        assert!(files.len() > 20);
        for f in files {
            let a = std::fs::read(dirs[0].path().join(&f)).unwrap();
            let b = std::fs::read(dirs[1].path().join(&f)).unwrap();
            assert!(a == b, "{} differs", f.display());
        }
    }
}
