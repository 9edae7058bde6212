//! Behavioral facts under a closed predicate vocabulary, mutated only by
//! add/update/delete/no-op operations recorded in an append-only journal.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusSplit};
use crate::error::{Error, Result};
use crate::prompts::{render, PromptPack};
use crate::providers::{Client, PromptKind, Request};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateGroup {
    Behavioral,
    Identity,
    Knowledge,
    Procedural,
    Relational,
    Temporal,
    Attentional,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub name: String,
    pub group: PredicateGroup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub version: String,
    /// True when the list is a structural stand-in rather than a published list.
    #[serde(default)]
    pub reconstruction: bool,
    #[serde(default)]
    pub note: String,
    pub predicates: Vec<Predicate>,
}

impl Vocabulary {
    pub fn from_json(s: &str) -> Result<Self> {
        let v: Vocabulary = serde_json::from_str(s)?;
        let mut seen = HashSet::new();
        for p in &v.predicates {
            if p.name.is_empty() || p.name != p.name.to_lowercase() || p.name.contains(' ') {
                return Err(Error::invalid(format!("predicate name `{}` is not a lowercase token", p.name)));
            }
            if !seen.insert(p.name.as_str()) {
                return Err(Error::invalid(format!("predicate `{}` listed twice", p.name)));
            }
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicates.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Predicate> {
        self.predicates.iter().find(|p| p.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn group_sizes(&self) -> BTreeMap<PredicateGroup, usize> {
        let mut m = BTreeMap::new();
        for p in &self.predicates {
            *m.entry(p.group).or_insert(0) += 1;
        }
        m
    }

    pub fn names(&self) -> Vec<&str> {
        self.predicates.iter().map(|p| p.name.as_str()).collect()
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_json(include_str!("../data/predicates.json")).expect("bundled vocabulary is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactStatus {
    Active,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactBody {
    pub subject_id: String,
    pub predicate: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<String>,
    pub source_message_ids: Vec<String>,
}

impl FactBody {
    fn dedup_key(&self) -> (String, String, String) {
        (
            self.subject_id.to_lowercase(),
            self.predicate.to_lowercase(),
            self.object.trim().to_lowercase(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub fact_id: String,
    #[serde(flatten)]
    pub body: FactBody,
    pub status: FactStatus,
    pub revision: u32,
}

impl Fact {
    pub fn is_active(&self) -> bool {
        self.status == FactStatus::Active
    }

    pub fn claim(&self) -> String {
        format!(
            "{} {} {}",
            self.body.subject_id,
            self.body.predicate.replace('_', " "),
            self.body.object
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AudnKind {
    Add,
    Update,
    Delete,
    Noop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudnOp {
    pub kind: AudnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_fact_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<FactBody>,
    #[serde(default)]
    pub rationale: String,
}

impl AudnOp {
    pub fn add(body: FactBody, rationale: &str) -> Self {
        Self {
            kind: AudnKind::Add,
            target_fact_id: None,
            payload: Some(body),
            rationale: rationale.into(),
        }
    }

    pub fn update(target: &str, body: FactBody, rationale: &str) -> Self {
        Self {
            kind: AudnKind::Update,
            target_fact_id: Some(target.into()),
            payload: Some(body),
            rationale: rationale.into(),
        }
    }

    pub fn delete(target: &str, rationale: &str) -> Self {
        Self {
            kind: AudnKind::Delete,
            target_fact_id: Some(target.into()),
            payload: None,
            rationale: rationale.into(),
        }
    }

    pub fn noop(rationale: &str) -> Self {
        Self {
            kind: AudnKind::Noop,
            target_fact_id: None,
            payload: None,
            rationale: rationale.into(),
        }
    }

    fn validate_shape(&self) -> Result<()> {
        let ok = match self.kind {
            AudnKind::Add => self.payload.is_some() && self.target_fact_id.is_none(),
            AudnKind::Update => self.payload.is_some() && self.target_fact_id.is_some(),
            AudnKind::Delete => self.payload.is_none() && self.target_fact_id.is_some(),
            AudnKind::Noop => self.payload.is_none() && self.target_fact_id.is_none(),
        };
        if !ok {
            return Err(Error::MalformedOp(format!("{:?} with target {:?}", self.kind, self.target_fact_id)));
        }
        if let Some(p) = &self.payload {
            if p.source_message_ids.is_empty() {
                return Err(Error::MalformedOp("payload has no source_message_ids".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub op: AudnOp,
    /// Id assigned by an ADD.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub message_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternLink {
    pub pattern_id: String,
    pub claim_text: String,
    pub fact_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceChain {
    pub claim_text: String,
    pub pattern_ids: Vec<String>,
    pub fact_ids: Vec<String>,
    pub passages: Vec<(String, String)>,
    /// Set when the traced fact is deleted and tombstones are allowed.
    #[serde(default)]
    pub tombstoned: bool,
}

/// How `trace` treats a deleted fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TombstoneMode {
    #[default]
    Error,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactSnapshot {
    pub subject_id: String,
    pub vocabulary_version: String,
    pub vocabulary_size: usize,
    pub journal_length: usize,
    pub facts: Vec<Fact>,
    pub patterns: Vec<PatternLink>,
}

const EXCERPT_CHARS: usize = 240;

#[derive(Debug, Clone)]
pub struct FactStore {
    subject_id: String,
    vocabulary: Vocabulary,
    facts: Vec<Fact>,
    journal: Vec<JournalEntry>,
    patterns: BTreeMap<String, PatternLink>,
    cited_by: BTreeMap<String, BTreeSet<String>>,
    passages: BTreeMap<String, String>,
}

fn fact_index(id: &str) -> Option<usize> {
    id.strip_prefix("F-")?.parse::<usize>().ok()?.checked_sub(1)
}

impl FactStore {
    pub fn new(subject_id: &str, vocabulary: Vocabulary) -> Self {
        Self {
            subject_id: subject_id.into(),
            vocabulary,
            facts: Vec::new(),
            journal: Vec::new(),
            patterns: BTreeMap::new(),
            cited_by: BTreeMap::new(),
            passages: BTreeMap::new(),
        }
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    pub fn all_facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn active_facts(&self) -> Vec<&Fact> {
        self.facts.iter().filter(|f| f.is_active()).collect()
    }

    pub fn len(&self) -> usize {
        self.facts.iter().filter(|f| f.is_active()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<&Fact> {
        fact_index(id).and_then(|i| self.facts.get(i))
    }

    fn active_mut(&mut self, id: &str) -> Result<&mut Fact> {
        let fact = fact_index(id)
            .and_then(|i| self.facts.get_mut(i))
            .ok_or_else(|| Error::UnknownTarget(id.into()))?;
        if !fact.is_active() {
            return Err(Error::UnknownTarget(id.into()));
        }
        Ok(fact)
    }

    /// Active fact with the same case-folded (subject, predicate, object).
    pub fn find_duplicate(&self, body: &FactBody) -> Option<&Fact> {
        let key = body.dedup_key();
        self.facts
            .iter()
            .find(|f| f.is_active() && f.body.dedup_key() == key)
    }

    fn check_predicate(&self, body: &FactBody) -> Result<()> {
        if self.vocabulary.contains(&body.predicate) {
            Ok(())
        } else {
            Err(Error::PredicateNotInVocabulary(body.predicate.clone()))
        }
    }

    /// Apply one operation. Returns the id an ADD assigned. A rejected op
    /// leaves both the store and the journal untouched.
    pub fn apply(&mut self, op: AudnOp) -> Result<Option<String>> {
        op.validate_shape()?;
        let assigned = match op.kind {
            AudnKind::Noop => None,
            AudnKind::Add => {
                let body = op.payload.clone().expect("validated");
                self.check_predicate(&body)?;
                if let Some(existing) = self.find_duplicate(&body) {
                    return Err(Error::DuplicateAdd {
                        subject: body.subject_id,
                        predicate: body.predicate,
                        object: body.object,
                        existing: existing.fact_id.clone(),
                    });
                }
                let id = format!("F-{}", self.facts.len() + 1);
                self.facts.push(Fact {
                    fact_id: id.clone(),
                    body,
                    status: FactStatus::Active,
                    revision: 1,
                });
                Some(id)
            }
            AudnKind::Update => {
                let body = op.payload.clone().expect("validated");
                self.check_predicate(&body)?;
                let fact = self.active_mut(op.target_fact_id.as_deref().expect("validated"))?;
                fact.body = body;
                fact.revision += 1;
                None
            }
            AudnKind::Delete => {
                let fact = self.active_mut(op.target_fact_id.as_deref().expect("validated"))?;
                fact.status = FactStatus::Deleted;
                fact.revision += 1;
                None
            }
        };
        self.journal.push(JournalEntry {
            seq: self.journal.len() as u64 + 1,
            op,
            assigned_id: assigned.clone(),
        });
        Ok(assigned)
    }

    /// Rebuild a store by re-applying a journal.
    pub fn replay(subject_id: &str, vocabulary: Vocabulary, journal: &[JournalEntry]) -> Result<Self> {
        let mut store = Self::new(subject_id, vocabulary);
        for entry in journal {
            let assigned = store.apply(entry.op.clone())?;
            if assigned != entry.assigned_id {
                return Err(Error::MalformedOp(format!(
                    "journal entry {} assigned {:?}, replay assigned {:?}",
                    entry.seq, entry.assigned_id, assigned
                )));
            }
        }
        Ok(store)
    }

    pub fn journal_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.journal {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse_journal(jsonl: &str) -> Result<Vec<JournalEntry>> {
        jsonl
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    pub fn add_passages(&mut self, passages: &[Passage]) {
        for p in passages {
            self.passages.insert(p.message_id.clone(), p.text.clone());
        }
    }

    /// Record that a spec item cites the given facts. Links are stored in
    /// both directions.
    pub fn link_pattern(&mut self, pattern_id: &str, claim_text: &str, fact_ids: &[String]) -> Result<()> {
        for id in fact_ids {
            if self.get(id).is_none() {
                return Err(Error::UnknownId(id.clone()));
            }
        }
        let link = self
            .patterns
            .entry(pattern_id.to_string())
            .or_insert_with(|| PatternLink {
                pattern_id: pattern_id.into(),
                claim_text: claim_text.into(),
                fact_ids: Vec::new(),
            });
        for id in fact_ids {
            if !link.fact_ids.contains(id) {
                link.fact_ids.push(id.clone());
            }
            self.cited_by
                .entry(id.clone())
                .or_default()
                .insert(pattern_id.to_string());
        }
        Ok(())
    }

    pub fn patterns(&self) -> impl Iterator<Item = &PatternLink> {
        self.patterns.values()
    }

    fn passages_of(&self, fact: &Fact) -> Vec<(String, String)> {
        fact.body
            .source_message_ids
            .iter()
            .map(|m| {
                let excerpt = self
                    .passages
                    .get(m)
                    .map(|t| t.chars().take(EXCERPT_CHARS).collect())
                    .unwrap_or_default();
                (m.clone(), excerpt)
            })
            .collect()
    }

    /// Walk from a spec item or a fact down to its source passages. Given a
    /// fact, also lists the spec items that cite it.
    pub fn trace(&self, id: &str, mode: TombstoneMode) -> Result<TraceChain> {
        if let Some(link) = self.patterns.get(id) {
            let mut passages = Vec::new();
            let mut fact_ids = Vec::new();
            for fid in &link.fact_ids {
                let fact = self.get(fid).ok_or_else(|| Error::UnknownId(fid.clone()))?;
                if !fact.is_active() && mode == TombstoneMode::Error {
                    continue;
                }
                fact_ids.push(fid.clone());
                for p in self.passages_of(fact) {
                    if !passages.contains(&p) {
                        passages.push(p);
                    }
                }
            }
            return Ok(TraceChain {
                claim_text: link.claim_text.clone(),
                pattern_ids: vec![link.pattern_id.clone()],
                fact_ids,
                passages,
                tombstoned: false,
            });
        }
        let fact = self.get(id).ok_or_else(|| Error::UnknownId(id.into()))?;
        if !fact.is_active() && mode == TombstoneMode::Error {
            return Err(Error::TombstonedFact(id.into()));
        }
        Ok(TraceChain {
            claim_text: fact.claim(),
            pattern_ids: self
                .cited_by
                .get(id)
                .map(|s| s.iter().cloned().collect())
                .unwrap_or_default(),
            fact_ids: vec![id.into()],
            passages: self.passages_of(fact),
            tombstoned: !fact.is_active(),
        })
    }

    pub fn snapshot(&self) -> FactSnapshot {
        FactSnapshot {
            subject_id: self.subject_id.clone(),
            vocabulary_version: self.vocabulary.version.clone(),
            vocabulary_size: self.vocabulary.len(),
            journal_length: self.journal.len(),
            facts: self.facts.clone(),
            patterns: self.patterns.values().cloned().collect(),
        }
    }
}

/// Paragraph-level passages of the training chapters, ids `<chapter>-pNNN`.
pub fn training_passages(corpus: &Corpus, split: &CorpusSplit) -> Vec<Passage> {
    let mut out = Vec::new();
    for id in &split.training {
        let Some(ch) = corpus.chapter(id) else { continue };
        for (k, para) in ch
            .text
            .split("\n\n")
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .enumerate()
        {
            out.push(Passage {
                message_id: format!("{id}-p{:03}", k + 1),
                text: para.to_string(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub message_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub ops: Vec<AudnOp>,
    pub rejections: Vec<Rejection>,
}

#[derive(Deserialize)]
struct RawOp {
    op: String,
    #[serde(default)]
    predicate: Option<String>,
    #[serde(default)]
    object: Option<String>,
    #[serde(default)]
    tier: Option<String>,
    #[serde(default)]
    target_fact_id: Option<String>,
    #[serde(default)]
    rationale: String,
}

/// Strip a surrounding markdown code fence, if present.
fn unfence(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let body = rest.split_once('\n').map(|x| x.1).unwrap_or("");
        body.trim_end().strip_suffix("```").unwrap_or(body).trim()
    } else {
        t
    }
}

/// Run extraction over `passages` in order, one provider call per passage.
///
/// Ops are validated against the store's vocabulary; an ADD matching an
/// active fact or an earlier ADD in this run becomes a NOOP. Invalid ops are
/// skipped and listed in `rejections`. Provider exhaustion aborts the run.
pub fn extract_facts(
    store: &FactStore,
    passages: &[Passage],
    client: &Client,
    prompts: &PromptPack,
) -> Result<Extraction> {
    let vocab = store.vocabulary();
    let predicates = vocab.names().join(", ");
    let mut seen: HashSet<(String, String, String)> = store
        .active_facts()
        .iter()
        .map(|f| f.body.dedup_key())
        .collect();
    let mut out = Extraction::default();

    for passage in passages {
        let mut vars = BTreeMap::new();
        vars.insert("subject", store.subject_id().to_string());
        vars.insert("predicates", predicates.clone());
        vars.insert("message_id", passage.message_id.clone());
        vars.insert("passage", passage.text.clone());
        let user = render(&prompts.extract, &vars)?;
        let (text, _) = client.generate(&Request::new(PromptKind::Extract, "", user))?;

        let raw_ops: Vec<serde_json::Value> = match serde_json::from_str(unfence(&text)) {
            Ok(serde_json::Value::Array(items)) => items,
            _ => {
                let e = Error::MalformedExtraction(format!("{}: not a JSON array", passage.message_id));
                log::warn!("{e}");
                out.rejections.push(Rejection {
                    message_id: passage.message_id.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        for item in raw_ops {
            match convert_op(store, passage, item) {
                Ok(op) => {
                    let op = match (&op.kind, &op.payload) {
                        (AudnKind::Add, Some(body)) if !seen.insert(body.dedup_key()) => {
                            AudnOp::noop(&format!(
                                "duplicate of an existing ({}, {}, {})",
                                body.subject_id, body.predicate, body.object
                            ))
                        }
                        _ => op,
                    };
                    out.ops.push(op);
                }
                Err(e) => {
                    log::warn!("{}: {e}", passage.message_id);
                    out.rejections.push(Rejection {
                        message_id: passage.message_id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(out)
}

fn convert_op(store: &FactStore, passage: &Passage, item: serde_json::Value) -> Result<AudnOp> {
    let raw: RawOp = serde_json::from_value(item).map_err(|e| Error::MalformedExtraction(e.to_string()))?;
    let kind = match raw.op.to_ascii_uppercase().as_str() {
        "ADD" => AudnKind::Add,
        "UPDATE" => AudnKind::Update,
        "DELETE" => AudnKind::Delete,
        "NOOP" => AudnKind::Noop,
        other => return Err(Error::MalformedExtraction(format!("unknown op `{other}`"))),
    };
    let body = match kind {
        AudnKind::Add | AudnKind::Update => {
            let predicate = raw
                .predicate
                .ok_or_else(|| Error::MalformedExtraction("missing predicate".into()))?
                .trim()
                .to_lowercase();
            let object = raw
                .object
                .filter(|o| !o.trim().is_empty())
                .ok_or_else(|| Error::MalformedExtraction("missing object".into()))?;
            if !store.vocabulary().contains(&predicate) {
                return Err(Error::PredicateNotInVocabulary(predicate));
            }
            Some(FactBody {
                subject_id: store.subject_id().to_string(),
                predicate,
                object: object.trim().to_string(),
                tier: raw.tier,
                source_message_ids: vec![passage.message_id.clone()],
            })
        }
        _ => None,
    };
    let op = AudnOp {
        kind,
        target_fact_id: match kind {
            AudnKind::Update | AudnKind::Delete => Some(
                raw.target_fact_id
                    .ok_or_else(|| Error::MalformedExtraction("missing target_fact_id".into()))?,
            ),
            _ => None,
        },
        payload: body,
        rationale: raw.rationale,
    };
    op.validate_shape()?;
    Ok(op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{Capability, StubProvider};
    use std::sync::Arc;

    fn body(p: &str, o: &str) -> FactBody {
        FactBody {
            subject_id: "s".into(),
            predicate: p.into(),
            object: o.into(),
            tier: None,
            source_message_ids: vec!["m1".into()],
        }
    }

    fn store() -> FactStore {
        FactStore::new("s", Vocabulary::default())
    }

    #[test]
    fn vocabulary_has_46_predicates_in_7_groups() {
        let v = Vocabulary::default();
        assert_eq!(v.len(), 46);
        assert_eq!(v.group_sizes().len(), 7);
        for p in ["avoids", "repeatedly_engages_in", "refuses_to", "values", "fears", "has_experienced"] {
            assert!(v.contains(p), "{p}");
        }
    }

    #[test]
    fn noop_is_identity_but_journaled() {
        let mut s = store();
        s.apply(AudnOp::add(body("values", "craft"), "")).unwrap();
        let before = s.snapshot().facts;
        s.apply(AudnOp::noop("dup")).unwrap();
        assert_eq!(s.snapshot().facts, before);
        assert_eq!(s.journal().len(), 2);
    }

    #[test]
    fn add_grows_store_and_journal() {
        let mut s = store();
        let id = s
            .apply(AudnOp::add(body("values", "craft over speed"), ""))
            .unwrap();
        assert_eq!(id.as_deref(), Some("F-1"));
        assert_eq!((s.len(), s.journal().len()), (1, 1));
    }

    #[test]
    fn rejections() {
        let mut s = store();
        s.apply(AudnOp::add(body("values", "craft"), "")).unwrap();
        assert!(matches!(
            s.apply(AudnOp::add(body("values", " CRAFT"), "")),
            Err(Error::DuplicateAdd { .. })
        ));
        assert!(matches!(
            s.apply(AudnOp::add(body("enjoys", "x"), "")),
            Err(Error::PredicateNotInVocabulary(_))
        ));
        assert!(matches!(s.apply(AudnOp::delete("F-9", "")), Err(Error::UnknownTarget(_))));
        let bad = AudnOp {
            kind: AudnKind::Noop,
            target_fact_id: Some("F-1".into()),
            payload: None,
            rationale: String::new(),
        };
        assert!(matches!(s.apply(bad), Err(Error::MalformedOp(_))));
        assert_eq!(s.journal().len(), 1);
    }

    #[test]
    fn update_bumps_revision_and_keeps_id() {
        let mut s = store();
        s.apply(AudnOp::add(body("values", "craft"), "")).unwrap();
        s.apply(AudnOp::update("F-1", body("values", "slow craft"), "")).unwrap();
        let f = s.get("F-1").unwrap();
        assert_eq!((f.revision, f.body.object.as_str()), (2, "slow craft"));
    }

    #[test]
    fn delete_then_trace() {
        let mut s = store();
        s.apply(AudnOp::add(body("values", "craft"), "")).unwrap();
        s.apply(AudnOp::delete("F-1", "contradicted")).unwrap();
        assert!(s.active_facts().is_empty());
        assert!(matches!(s.trace("F-1", TombstoneMode::Error), Err(Error::TombstonedFact(_))));
        let chain = s.trace("F-1", TombstoneMode::Flag).unwrap();
        assert!(chain.tombstoned);
        // the journal still holds the ADD, and replay agrees on status
        let replayed = FactStore::replay("s", Vocabulary::default(), s.journal()).unwrap();
        assert_eq!(replayed.get("F-1").unwrap().status, FactStatus::Deleted);
        assert!(matches!(s.apply(AudnOp::delete("F-1", "")), Err(Error::UnknownTarget(_))));
    }

    #[test]
    fn trace_is_bidirectional() {
        let mut s = store();
        for i in 0..73 {
            s.apply(AudnOp::add(
                FactBody {
                    source_message_ids: vec![format!("m{i}")],
                    ..body("values", &format!("thing {i}"))
                },
                "",
            ))
            .unwrap();
        }
        s.add_passages(&[Passage {
            message_id: "m72".into(),
            text: "I valued thing 72 above all.".into(),
        }]);
        s.link_pattern("A2", "anchor two", &["F-73".into()]).unwrap();
        let down = s.trace("A2", TombstoneMode::Error).unwrap();
        assert_eq!(down.fact_ids, vec!["F-73"]);
        assert_eq!(down.passages[0].0, "m72");
        let up = s.trace("F-73", TombstoneMode::Error).unwrap();
        assert_eq!(up.pattern_ids, vec!["A2"]);
        assert!(s.trace("F-1", TombstoneMode::Error).unwrap().pattern_ids.is_empty());
        assert!(matches!(s.trace("X9", TombstoneMode::Error), Err(Error::UnknownId(_))));
    }

    fn stub_client(text: &'static str) -> Client {
        Client::deterministic(Arc::new(StubProvider::from_fn(
            "stub",
            vec![Capability::Generate],
            move |_| Ok(text.to_string()),
        )))
        .unwrap()
    }

    fn passage(id: &str) -> Passage {
        Passage {
            message_id: id.into(),
            text: "text".into(),
        }
    }

    #[test]
    fn extraction_passthrough_and_dedup() {
        let c = stub_client(r#"[{"op":"ADD","predicate":"values","object":"honest work"}]"#);
        let s = store();
        let out = extract_facts(&s, &[passage("p1"), passage("p2")], &c, &PromptPack::default()).unwrap();
        assert_eq!(out.ops.len(), 2);
        assert_eq!(out.ops[0].kind, AudnKind::Add);
        assert_eq!(out.ops[0].payload.as_ref().unwrap().source_message_ids, vec!["p1"]);
        assert_eq!(out.ops[1].kind, AudnKind::Noop);
    }

    #[test]
    fn extraction_rejects_unknown_predicate_and_continues() {
        let c = stub_client(
            r#"```json
[{"op":"ADD","predicate":"muses_about","object":"x"},{"op":"ADD","predicate":"fears","object":"debt"}]
```"#,
        );
        let out = extract_facts(&store(), &[passage("p1")], &c, &PromptPack::default()).unwrap();
        assert_eq!(out.ops.len(), 1);
        assert_eq!(out.rejections.len(), 1);
        assert!(out.rejections[0].reason.contains("muses_about"));
    }

    #[test]
    fn extraction_logs_malformed_output() {
        let c = stub_client("not json");
        let out = extract_facts(&store(), &[passage("p1")], &c, &PromptPack::default()).unwrap();
        assert!(out.ops.is_empty());
        assert_eq!(out.rejections.len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Step {
            Add(usize, usize),
            Update(usize, usize),
            Delete(usize),
            Noop,
        }

        fn step() -> impl Strategy<Value = Step> {
            prop_oneof![
                (0usize..4, 0usize..5).prop_map(|(p, o)| Step::Add(p, o)),
                (0usize..8, 0usize..5).prop_map(|(t, o)| Step::Update(t, o)),
                (0usize..8).prop_map(Step::Delete),
                Just(Step::Noop),
            ]
        }

        const PREDS: [&str; 4] = ["values", "fears", "avoids", "not_a_predicate"];

        proptest! {
            #[test]
            fn state_equals_journal_replay(steps in prop::collection::vec(step(), 0..40)) {
                let mut s = store();
                for st in steps {
                    let op = match st {
                        Step::Add(p, o) => AudnOp::add(body(PREDS[p], &format!("o{o}")), ""),
                        Step::Update(t, o) => AudnOp::update(&format!("F-{}", t + 1), body("values", &format!("u{o}")), ""),
                        Step::Delete(t) => AudnOp::delete(&format!("F-{}", t + 1), ""),
                        Step::Noop => AudnOp::noop(""),
                    };
                    let _ = s.apply(op);
                }
                let r = FactStore::replay("s", Vocabulary::default(), s.journal()).unwrap();
                prop_assert_eq!(r.snapshot(), s.snapshot());
                prop_assert!(s.active_facts().iter().all(|f| s.vocabulary().contains(&f.body.predicate)));
                for f in s.active_facts() {
                    prop_assert!(s.trace(&f.fact_id, TombstoneMode::Error).is_ok());
                    prop_assert!(!f.body.source_message_ids.is_empty());
                }
            }
        }
    }
}
