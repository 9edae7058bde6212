//! Condition context assembly and response generation over a
//! subject × condition matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::battery::Battery;
use crate::corpus::{HeldoutText, DEFAULT_LEAK_NGRAM};
use crate::digest::{sha256_hex, to_pretty_json};
use crate::error::{Error, Result};
use crate::prompts::{response_system_prompt, response_user_prompt};
use crate::providers::{CallRecord, Client, GenParams, PromptKind, Request};
use crate::specdoc::{estimate_tokens, DerangementMap, DerangementScheme};
use crate::text::NgramIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConditionCode {
    C5,
    C2a,
    C2cV1,
    C2cV2,
    C4,
    C4a,
    C8,
    C9,
    C1,
    C3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConditionId {
    pub code: ConditionCode,
    /// Memory-system conditions only: the system ingested the corpus itself.
    pub native: bool,
}

impl ConditionId {
    pub const fn new(code: ConditionCode) -> Self {
        Self { code, native: false }
    }

    pub fn uses_spec(self) -> bool {
        use ConditionCode::*;
        matches!(self.code, C2a | C4a | C9 | C3)
    }
}

impl From<ConditionCode> for ConditionId {
    fn from(code: ConditionCode) -> Self {
        Self::new(code)
    }
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ConditionCode::*;
        let base = match self.code {
            C5 => "C5",
            C2a => "C2a",
            C2cV1 => "C2c_v1",
            C2cV2 => "C2c_v2",
            C4 => "C4",
            C4a => "C4a",
            C8 => "C8",
            C9 => "C9",
            C1 => "C1",
            C3 => "C3",
        };
        f.write_str(base)?;
        if self.native {
            f.write_str("_native")?;
        }
        Ok(())
    }
}

impl FromStr for ConditionId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        use ConditionCode::*;
        let (base, native) = match s.strip_suffix("_native") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let code = match base {
            "C5" => C5,
            "C2a" => C2a,
            "C2c_v1" | "C2c" => C2cV1,
            "C2c_v2" => C2cV2,
            "C4" => C4,
            "C4a" => C4a,
            "C8" => C8,
            "C9" => C9,
            "C1" => C1,
            "C3" => C3,
            _ => return Err(Error::invalid(format!("unknown condition `{s}`"))),
        };
        if native && !matches!(code, C1 | C3) {
            return Err(Error::invalid(format!("`{s}`: only C1 and C3 have native variants")));
        }
        Ok(Self { code, native })
    }
}

impl Serialize for ConditionId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConditionId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn parse_conditions(list: &str) -> Result<Vec<ConditionId>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Facts,
    Corpus,
    Retrieval,
    Spec,
    WrongSpec,
}

impl SegmentKind {
    fn order(self) -> u8 {
        match self {
            SegmentKind::Facts => 0,
            SegmentKind::Corpus => 1,
            SegmentKind::Retrieval => 2,
            SegmentKind::Spec | SegmentKind::WrongSpec => 3,
        }
    }

    /// Header shown to the response model. A wrong spec is labelled exactly
    /// like the subject's own.
    fn header(self) -> &'static str {
        match self {
            SegmentKind::Facts => "### Extracted facts",
            SegmentKind::Corpus => "### Source text",
            SegmentKind::Retrieval => "### Retrieved facts",
            SegmentKind::Spec | SegmentKind::WrongSpec => "### Behavioral specification",
        }
    }
}

/// Where a segment's text came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    TrainingText { subject_id: String },
    ExtractedFacts { subject_id: String },
    AuthoredSpec { subject_id: String },
    Retrieval { system_id: String },
    Heldout { subject_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub provenance: Provenance,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub segments: Vec<Segment>,
    pub char_count: usize,
}

impl ContextBlock {
    fn from_segments(mut segments: Vec<Segment>) -> Result<Self> {
        for s in &segments {
            if let Provenance::Heldout { subject_id } = &s.provenance {
                return Err(Error::HeldoutProvenance(format!("{:?} of {subject_id}", s.kind)));
            }
        }
        segments.sort_by_key(|s| s.kind.order());
        let mut block = Self {
            segments,
            char_count: 0,
        };
        block.char_count = block.render().chars().count();
        Ok(block)
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn render(&self) -> String {
        self.segments
            .iter()
            .map(|s| format!("{}\n\n{}", s.kind.header(), s.text.trim_end()))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalEntry {
    pub qid: String,
    pub ranked_facts: Vec<String>,
}

/// Retrieval results produced out of band by a memory system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalLog {
    pub system_id: String,
    pub subject_id: String,
    pub entries: Vec<RetrievalEntry>,
}

impl RetrievalLog {
    pub fn for_question(&self, qid: &str) -> Option<&RetrievalEntry> {
        self.entries.iter().find(|e| e.qid == qid)
    }
}

/// Everything that may be served for one subject.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectAssets {
    pub subject_id: String,
    pub name: String,
    pub source_title: String,
    /// Served form of the subject's own specification.
    pub spec: Option<String>,
    /// Name-scrubbed served form, used when this spec is served to others.
    pub anonymized_spec: Option<String>,
    /// Fact lines, one per active fact.
    pub facts: Option<String>,
    pub training_text: Option<String>,
    pub retrieval: Option<RetrievalLog>,
    #[serde(default)]
    pub native_retrieval: Option<RetrievalLog>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetPool {
    pub subjects: BTreeMap<String, SubjectAssets>,
    pub derangements: Vec<DerangementMap>,
}

impl AssetPool {
    fn subject(&self, id: &str) -> Result<&SubjectAssets> {
        self.subjects
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no assets for subject `{id}`")))
    }

    pub fn derangement(&self, scheme: DerangementScheme) -> Option<&DerangementMap> {
        self.derangements.iter().find(|d| d.scheme == scheme)
    }

    /// Digest of every asset that `condition` would serve for `subject_id`.
    pub fn asset_digests(&self, subject_id: &str, condition: ConditionId) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        if let Ok(block) = assemble_context(condition, subject_id, None, self, None) {
            for s in block.segments {
                m.insert(format!("{:?}", s.kind).to_lowercase(), sha256_hex(&s.text));
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBudget {
    pub max_tokens: usize,
}

fn missing(condition: ConditionId, asset: &str) -> Error {
    Error::MissingAsset {
        condition: condition.to_string(),
        asset: asset.into(),
    }
}

/// Build the context block `condition` serves to `subject_id`. Retrieval
/// conditions need `qid`; when it is `None` the retrieval segment is omitted.
pub fn assemble_context(
    condition: ConditionId,
    subject_id: &str,
    qid: Option<&str>,
    pool: &AssetPool,
    budget: Option<ContextBudget>,
) -> Result<ContextBlock> {
    use ConditionCode::*;
    let a = pool.subject(subject_id)?;
    let sid = subject_id.to_string();
    let spec = || -> Result<Segment> {
        Ok(Segment {
            kind: SegmentKind::Spec,
            provenance: Provenance::AuthoredSpec {
                subject_id: sid.clone(),
            },
            text: a.spec.clone().ok_or_else(|| missing(condition, "spec"))?,
        })
    };
    let facts = || -> Result<Segment> {
        Ok(Segment {
            kind: SegmentKind::Facts,
            provenance: Provenance::ExtractedFacts {
                subject_id: sid.clone(),
            },
            text: a.facts.clone().ok_or_else(|| missing(condition, "facts"))?,
        })
    };
    let corpus = || -> Result<Segment> {
        Ok(Segment {
            kind: SegmentKind::Corpus,
            provenance: Provenance::TrainingText {
                subject_id: sid.clone(),
            },
            text: a
                .training_text
                .clone()
                .ok_or_else(|| missing(condition, "training corpus"))?,
        })
    };
    let retrieval = || -> Result<Option<Segment>> {
        let log = if condition.native {
            a.native_retrieval.as_ref()
        } else {
            a.retrieval.as_ref()
        }
        .ok_or_else(|| missing(condition, "retrieval log"))?;
        let Some(qid) = qid else { return Ok(None) };
        let entry = log
            .for_question(qid)
            .ok_or_else(|| missing(condition, &format!("retrieval entry for {qid}")))?;
        Ok(Some(Segment {
            kind: SegmentKind::Retrieval,
            provenance: Provenance::Retrieval {
                system_id: log.system_id.clone(),
            },
            text: entry
                .ranked_facts
                .iter()
                .map(|f| format!("- {f}\n"))
                .collect(),
        }))
    };
    let wrong_spec = |scheme: DerangementScheme| -> Result<Segment> {
        let map = pool
            .derangement(scheme)
            .ok_or_else(|| missing(condition, "derangement map"))?;
        let target = map
            .assigned(subject_id)
            .ok_or_else(|| missing(condition, "derangement entry"))?;
        let other = pool.subject(target).map_err(|_| missing(condition, &format!("spec of {target}")))?;
        Ok(Segment {
            kind: SegmentKind::WrongSpec,
            provenance: Provenance::AuthoredSpec {
                subject_id: target.to_string(),
            },
            text: other
                .anonymized_spec
                .clone()
                .ok_or_else(|| missing(condition, &format!("anonymized spec of {target}")))?,
        })
    };

    let segments = match condition.code {
        C5 => vec![],
        C2a => vec![spec()?],
        C2cV1 => vec![wrong_spec(DerangementScheme::V1Fixed)?],
        C2cV2 => vec![wrong_spec(DerangementScheme::V2Random)?],
        C4 => vec![facts()?],
        C4a => vec![facts()?, spec()?],
        C8 => vec![corpus()?],
        C9 => vec![corpus()?, spec()?],
        C1 => retrieval()?.into_iter().collect(),
        C3 => retrieval()?.into_iter().chain([spec()?]).collect(),
    };
    let block = ContextBlock::from_segments(segments)?;
    if let Some(b) = budget {
        let required = estimate_tokens(&block.render());
        if required > b.max_tokens {
            return Err(Error::ContextBudgetExceeded {
                required,
                available: b.max_tokens,
            });
        }
    }
    Ok(block)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub subject_id: String,
    pub qid: String,
    pub condition: ConditionId,
    pub response_text: String,
    pub call: CallRecord,
    pub battery_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionRun {
    pub records: Vec<ResponseRecord>,
    /// Served context per question (`*` when shared by every question).
    pub contexts: BTreeMap<String, ContextBlock>,
}

/// Generate one response per behavioral question. Provider failures become
/// failed records; the run continues.
pub fn run_condition(
    battery: &Battery,
    condition: ConditionId,
    pool: &AssetPool,
    client: &Client,
    params: GenParams,
    budget: Option<ContextBudget>,
) -> Result<ConditionRun> {
    if !battery.is_frozen() {
        return Err(Error::NotFrozen);
    }
    if !params.is_study_pinned() {
        return Err(Error::UnpinnedParameters);
    }
    let checksum = battery.checksum().ok_or(Error::NotFrozen)?.to_string();
    let subject_id = battery.subject_id();
    let assets = pool.subject(subject_id)?;
    let system = response_system_prompt(&assets.name);
    let per_question = matches!(condition.code, ConditionCode::C1 | ConditionCode::C3);
    let mut contexts = BTreeMap::new();
    if !per_question {
        contexts.insert("*".to_string(), assemble_context(condition, subject_id, None, pool, budget)?);
    }
    let mut questions: Vec<_> = battery.behavioral().collect();
    questions.sort_by(|a, b| a.qid.cmp(&b.qid));
    let mut records = Vec::with_capacity(questions.len());
    for q in questions {
        let block = if per_question {
            let b = assemble_context(condition, subject_id, Some(&q.qid), pool, budget)?;
            contexts.insert(q.qid.clone(), b.clone());
            b
        } else {
            contexts["*"].clone()
        };
        let request = Request {
            kind: PromptKind::Respond,
            system: system.clone(),
            user: response_user_prompt(&block.render(), &q.stem),
            params,
        };
        let call = client.call(&request)?;
        records.push(ResponseRecord {
            subject_id: subject_id.to_string(),
            qid: q.qid.clone(),
            condition,
            response_text: call.response_text.clone(),
            call,
            battery_checksum: checksum.clone(),
        });
    }
    Ok(ConditionRun { records, contexts })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellManifest {
    pub run_id: String,
    pub subject_id: String,
    pub condition: ConditionId,
    pub battery_checksum: String,
    pub provider_id: String,
    pub asset_digests: BTreeMap<String, String>,
    pub n_records: usize,
    pub n_failed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellFile {
    pub manifest: CellManifest,
    pub records: Vec<ResponseRecord>,
    pub contexts: BTreeMap<String, ContextBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    Resumed,
    Excluded,
    Failed,
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSummary {
    pub subject_id: String,
    pub condition: ConditionId,
    pub status: CellStatus,
    pub n_records: usize,
    pub n_failed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLedger {
    pub run_id: String,
    pub cells: Vec<CellSummary>,
}

#[derive(Debug, Clone, Default)]
pub struct MatrixOptions {
    pub resume: bool,
    /// Stop after executing this many cells (resumed cells do not count).
    pub max_cells: Option<usize>,
    pub budget: Option<ContextBudget>,
}

pub fn cell_path(root: &Path, run_id: &str, subject_id: &str, condition: ConditionId) -> PathBuf {
    root.join(run_id).join(subject_id).join(format!("{condition}.json"))
}

pub fn read_cell(path: &Path) -> Result<CellFile> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Run every (subject, condition) cell in order, writing
/// `<root>/<run_id>/<subject>/<condition>.json` per cell. With `resume`, a
/// cell whose file exists and matches the current battery is skipped. Cells
/// over the context budget are written as excluded.
pub fn run_matrix(
    root: &Path,
    run_id: &str,
    batteries: &[Battery],
    conditions: &[ConditionId],
    pool: &AssetPool,
    client: &Client,
    opts: &MatrixOptions,
) -> Result<RunLedger> {
    let mut cells = Vec::new();
    let mut executed = 0usize;
    for battery in batteries {
        let subject_id = battery.subject_id();
        let checksum = battery.checksum().ok_or(Error::NotFrozen)?;
        for &condition in conditions {
            let path = cell_path(root, run_id, subject_id, condition);
            let summary = |status, n_records, n_failed, reason: Option<String>| CellSummary {
                subject_id: subject_id.to_string(),
                condition,
                status,
                n_records,
                n_failed,
                reason,
            };
            if opts.resume && path.exists() {
                match read_cell(&path) {
                    Ok(cell) if cell.manifest.battery_checksum == checksum => {
                        let status = if cell.manifest.excluded.is_some() {
                            CellStatus::Excluded
                        } else {
                            CellStatus::Resumed
                        };
                        cells.push(summary(status, cell.manifest.n_records, cell.manifest.n_failed, cell.manifest.excluded));
                        continue;
                    }
                    Ok(_) => log::info!("{}: stale battery checksum, re-running", path.display()),
                    Err(e) => log::info!("{}: unreadable ({e}), re-running", path.display()),
                }
            }
            if opts.max_cells.is_some_and(|m| executed >= m) {
                cells.push(summary(CellStatus::NotRun, 0, 0, Some("cell limit reached".into())));
                continue;
            }
            executed += 1;
            let mut manifest = CellManifest {
                run_id: run_id.into(),
                subject_id: subject_id.into(),
                condition,
                battery_checksum: checksum.into(),
                provider_id: client.provider_id().into(),
                asset_digests: pool.asset_digests(subject_id, condition),
                n_records: 0,
                n_failed: 0,
                excluded: None,
            };
            let (file, status) = match run_condition(battery, condition, pool, client, GenParams::STUDY, opts.budget) {
                Ok(run) => {
                    manifest.n_records = run.records.len();
                    manifest.n_failed = run.records.iter().filter(|r| r.call.is_failed()).count();
                    (
                        Some(CellFile {
                            manifest: manifest.clone(),
                            records: run.records,
                            contexts: run.contexts,
                        }),
                        CellStatus::Completed,
                    )
                }
                Err(e @ Error::ContextBudgetExceeded { .. }) => {
                    manifest.excluded = Some(e.to_string());
                    (
                        Some(CellFile {
                            manifest: manifest.clone(),
                            records: vec![],
                            contexts: BTreeMap::new(),
                        }),
                        CellStatus::Excluded,
                    )
                }
                Err(e) => {
                    log::warn!("{subject_id}/{condition}: {e}");
                    cells.push(summary(CellStatus::Failed, 0, 0, Some(e.to_string())));
                    continue;
                }
            };
            if let Some(file) = file {
                std::fs::create_dir_all(path.parent().expect("cell path has a parent"))?;
                std::fs::write(&path, to_pretty_json(&file)?)?;
            }
            cells.push(summary(status, manifest.n_records, manifest.n_failed, manifest.excluded));
        }
    }
    Ok(RunLedger {
        run_id: run_id.into(),
        cells,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationReport {
    pub blocks_scanned: usize,
    pub heldout_segments: Vec<String>,
    /// (cell or block label, overlapping span)
    pub overlaps: Vec<(String, String)>,
}

impl IsolationReport {
    pub fn is_clean(&self) -> bool {
        self.heldout_segments.is_empty() && self.overlaps.is_empty()
    }
}

/// Scan served context blocks for held-out provenance tags and for runs of
/// `n` or more tokens shared with the held-out text.
pub fn isolation_scan<'a>(
    blocks: impl IntoIterator<Item = (String, &'a ContextBlock)>,
    heldout: &HeldoutText,
    n: Option<usize>,
) -> IsolationReport {
    let idx: NgramIndex = heldout.ngram_index(n.unwrap_or(DEFAULT_LEAK_NGRAM));
    let mut report = IsolationReport::default();
    for (label, block) in blocks {
        report.blocks_scanned += 1;
        for seg in &block.segments {
            if matches!(seg.provenance, Provenance::Heldout { .. }) {
                report.heldout_segments.push(label.clone());
            }
            for (span, _) in idx.matching_spans(&seg.text) {
                report.overlaps.push((label.clone(), span));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::{freeze, Category, FreezeOptions, Question, Tier, WindowRef};
    use crate::providers::{FlakyProvider, StubProvider, ToyProvider};
    use crate::specdoc::derange_fixed;
    use std::sync::Arc;

    fn c(s: &str) -> ConditionId {
        s.parse().unwrap()
    }

    #[test]
    fn condition_ids_roundtrip() {
        for s in ["C5", "C2a", "C2c_v1", "C2c_v2", "C4", "C4a", "C8", "C9", "C1", "C3", "C1_native", "C3_native"] {
            assert_eq!(c(s).to_string(), s);
            let json = serde_json::to_string(&c(s)).unwrap();
            assert_eq!(serde_json::from_str::<ConditionId>(&json).unwrap(), c(s));
        }
        assert!("C4a_native".parse::<ConditionId>().is_err());
        assert!("C7".parse::<ConditionId>().is_err());
    }

    fn pool() -> AssetPool {
        let mut subjects = BTreeMap::new();
        for (id, name) in [("seacole", "Mary Seacole"), ("bernal_diaz", "Bernal Díaz"), ("babur", "Bābur")] {
            subjects.insert(
                id.to_string(),
                SubjectAssets {
                    subject_id: id.into(),
                    name: name.into(),
                    source_title: format!("{name}'s memoir"),
                    spec: Some(format!("SPEC OF {id}")),
                    anonymized_spec: Some(format!("ANON SPEC OF {id}")),
                    facts: Some(format!("- F-1 | values | {id} things\n")),
                    training_text: Some(if id == "babur" { "word ".repeat(2000) } else { format!("corpus of {id}") }),
                    retrieval: Some(RetrievalLog {
                        system_id: "sys".into(),
                        subject_id: id.into(),
                        entries: vec![RetrievalEntry {
                            qid: "q1".into(),
                            ranked_facts: vec!["fact a".into(), "fact b".into()],
                        }],
                    }),
                    native_retrieval: None,
                },
            );
        }
        let subjects_list: Vec<String> = subjects.keys().cloned().collect();
        let table: BTreeMap<String, String> = [("seacole", "bernal_diaz"), ("bernal_diaz", "babur"), ("babur", "seacole")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        AssetPool {
            subjects,
            derangements: vec![derange_fixed(&subjects_list, &table).unwrap()],
        }
    }

    #[test]
    fn baseline_is_empty() {
        let b = assemble_context(c("C5"), "seacole", None, &pool(), None).unwrap();
        assert!(b.is_empty());
        assert_eq!(b.char_count, 0);
    }

    #[test]
    fn wrong_spec_serves_the_assigned_anonymized_spec() {
        let p = pool();
        let b = assemble_context(c("C2c_v1"), "seacole", None, &p, None).unwrap();
        assert_eq!(b.segments[0].text, "ANON SPEC OF bernal_diaz");
        let own = assemble_context(c("C2a"), "seacole", None, &p, None).unwrap();
        // identical labelling
        assert_eq!(
            b.render().lines().next(),
            own.render().lines().next()
        );
        assert!(matches!(
            assemble_context(c("C2c_v2"), "seacole", None, &p, None),
            Err(Error::MissingAsset { .. })
        ));
    }

    #[test]
    fn segment_order_is_fixed() {
        let p = pool();
        let kinds = |s: &str, q| {
            assemble_context(c(s), "seacole", q, &p, None)
                .unwrap()
                .segments
                .iter()
                .map(|s| s.kind)
                .collect::<Vec<_>>()
        };
        assert_eq!(kinds("C4a", None), vec![SegmentKind::Facts, SegmentKind::Spec]);
        assert_eq!(kinds("C9", None), vec![SegmentKind::Corpus, SegmentKind::Spec]);
        assert_eq!(kinds("C3", Some("q1")), vec![SegmentKind::Retrieval, SegmentKind::Spec]);
    }

    #[test]
    fn over_budget_corpus_is_refused() {
        let err = assemble_context(c("C9"), "babur", None, &pool(), Some(ContextBudget { max_tokens: 1000 })).unwrap_err();
        assert!(matches!(err, Error::ContextBudgetExceeded { required, available: 1000 } if required > 2000));
    }

    #[test]
    fn heldout_provenance_never_serves() {
        let seg = Segment {
            kind: SegmentKind::Corpus,
            provenance: Provenance::Heldout { subject_id: "s".into() },
            text: "x".into(),
        };
        assert!(matches!(ContextBlock::from_segments(vec![seg]), Err(Error::HeldoutProvenance(_))));
    }

    fn battery(n: usize) -> Battery {
        let text = "one two three four five six seven eight nine ten.";
        let mut b = Battery::new("seacole", "gen");
        for i in 0..n {
            b.push(Question {
                qid: format!("q{:02}", i + 1),
                subject_id: "seacole".into(),
                tier: Tier::BehavioralPrediction,
                category: Category::Values,
                stem: format!("What would you do in case {i}?"),
                heldout_span: "one two".into(),
                window_ref: WindowRef {
                    chapter_id: "ch001".into(),
                    char_start: 0,
                    char_end: text.len(),
                },
            })
            .unwrap();
        }
        freeze(b, &HeldoutText::single("seacole", text), FreezeOptions::default()).unwrap().0
    }

    fn toy() -> Client {
        Client::deterministic(Arc::new(ToyProvider::new("toy"))).unwrap()
    }

    #[test]
    fn one_record_per_question_and_deterministic() {
        let b = battery(39);
        let a = run_condition(&b, c("C2a"), &pool(), &toy(), GenParams::STUDY, None).unwrap();
        let again = run_condition(&b, c("C2a"), &pool(), &toy(), GenParams::STUDY, None).unwrap();
        assert_eq!(a.records.len(), 39);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn parameters_must_be_pinned() {
        let p = GenParams {
            temperature: 0.7,
            max_output_tokens: 1024,
        };
        assert!(matches!(
            run_condition(&battery(2), c("C5"), &pool(), &toy(), p, None),
            Err(Error::UnpinnedParameters)
        ));
    }

    #[test]
    fn one_full_fail_is_recorded_not_dropped() {
        let flaky = FlakyProvider::fail_when(Arc::new(ToyProvider::new("toy")), |r| r.user.contains("case 7?"));
        let client = Client::deterministic(Arc::new(flaky)).unwrap();
        let run = run_condition(&battery(39), c("C4"), &pool(), &client, GenParams::STUDY, None).unwrap();
        assert_eq!(run.records.len(), 39);
        assert_eq!(run.records.iter().filter(|r| r.call.is_failed()).count(), 1);
    }

    #[test]
    fn prompts_differ_only_in_context() {
        let seen = Arc::new(std::sync::Mutex::new(Vec::<(String, String)>::new()));
        let s2 = seen.clone();
        let client = Client::deterministic(Arc::new(StubProvider::from_fn(
            "rec",
            vec![crate::providers::Capability::Generate],
            move |r| {
                s2.lock().unwrap().push((r.system.clone(), r.user.clone()));
                Ok("ok".into())
            },
        )))
        .unwrap();
        let b = battery(3);
        for cond in ["C5", "C2a", "C4", "C4a", "C8", "C9"] {
            run_condition(&b, c(cond), &pool(), &client, GenParams::STUDY, None).unwrap();
        }
        let seen = seen.lock().unwrap();
        assert!(seen.iter().all(|(s, _)| s == &seen[0].0));
        for (_, user) in seen.iter() {
            let q = user.rsplit("Question: ").next().unwrap();
            assert!(q.starts_with("What would you do in case"));
        }
    }

    #[test]
    fn matrix_resume_and_exclusion() {
        let dir = tempfile::tempdir().unwrap();
        let b = battery(3);
        let conds = parse_conditions("C5,C2a,C4,C4a,C8,C9").unwrap();
        let opts = MatrixOptions {
            max_cells: Some(4),
            ..Default::default()
        };
        let first = run_matrix(dir.path(), "r1", &[b.clone()], &conds, &pool(), &toy(), &opts).unwrap();
        let done: Vec<_> = first.cells.iter().map(|c| c.status).collect();
        assert_eq!(&done[..4], &[CellStatus::Completed; 4]);
        assert_eq!(&done[4..], &[CellStatus::NotRun; 2]);
        let resumed = run_matrix(
            dir.path(),
            "r1",
            &[b],
            &conds,
            &pool(),
            &toy(),
            &MatrixOptions {
                resume: true,
                ..Default::default()
            },
        )
        .unwrap();
        let st: Vec<_> = resumed.cells.iter().map(|c| c.status).collect();
        assert_eq!(&st[..4], &[CellStatus::Resumed; 4]);
        assert_eq!(&st[4..], &[CellStatus::Completed; 2]);
        let cell = read_cell(&cell_path(dir.path(), "r1", "seacole", c("C4a"))).unwrap();
        assert_eq!(cell.manifest.asset_digests.len(), 2);
    }

    #[test]
    fn isolation_scan_flags_overlap() {
        let held = HeldoutText::single("s", "alpha beta gamma delta epsilon zeta eta theta");
        let clean = ContextBlock::from_segments(vec![Segment {
            kind: SegmentKind::Spec,
            provenance: Provenance::AuthoredSpec { subject_id: "s".into() },
            text: "alpha beta gamma delta epsilon zeta".into(),
        }])
        .unwrap();
        assert!(isolation_scan([("a".to_string(), &clean)], &held, None).is_clean());
        let dirty = ContextBlock::from_segments(vec![Segment {
            kind: SegmentKind::Spec,
            provenance: Provenance::AuthoredSpec { subject_id: "s".into() },
            text: "so: alpha beta gamma delta epsilon zeta eta".into(),
        }])
        .unwrap();
        assert_eq!(isolation_scan([("b".to_string(), &dirty)], &held, None).overlaps.len(), 1);
    }
}
