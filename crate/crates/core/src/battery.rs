//! Prediction batteries: backward-designed questions whose answers are
//! verbatim held-out spans, deduplicated, capped and frozen under a checksum.

use std::collections::{BTreeMap, HashSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{leakage_audit, HeldoutText, LeakReport, DEFAULT_LEAK_NGRAM};
use crate::digest::{canonical_digest, ChecksumAlgorithm};
use crate::error::{Error, Result};
use crate::prompts::{render, PromptPack};
use crate::providers::{Client, PromptKind, Request};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Decisions,
    Values,
    Relationships,
    Conflict,
    Learning,
    Risk,
    Creativity,
    Stress,
    Career,
    ChangeOverTime,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Decisions,
        Category::Values,
        Category::Relationships,
        Category::Conflict,
        Category::Learning,
        Category::Risk,
        Category::Creativity,
        Category::Stress,
        Category::Career,
        Category::ChangeOverTime,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Decisions => "decisions",
            Category::Values => "values",
            Category::Relationships => "relationships",
            Category::Conflict => "conflict",
            Category::Learning => "learning",
            Category::Risk => "risk",
            Category::Creativity => "creativity",
            Category::Stress => "stress",
            Category::Career => "career",
            Category::ChangeOverTime => "change_over_time",
        }
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_lowercase().replace([' ', '-'], "_");
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == key)
            .ok_or_else(|| Error::invalid(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    BehavioralPrediction,
    Recall,
    AdversarialAbstention,
}

/// Character range of the generation window inside a held-out chapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRef {
    pub chapter_id: String,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub qid: String,
    pub subject_id: String,
    pub tier: Tier,
    pub category: Category,
    pub stem: String,
    pub heldout_span: String,
    pub window_ref: WindowRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Battery {
    subject_id: String,
    generator_provider_id: String,
    questions: Vec<Question>,
    #[serde(default)]
    checksum: Option<String>,
    #[serde(default)]
    checksum_algorithm: ChecksumAlgorithm,
    #[serde(default)]
    frozen: bool,
    /// Leak matches tolerated under the override flag.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    leak_override: Vec<String>,
}

#[derive(Serialize)]
struct ChecksumContent<'a> {
    subject_id: &'a str,
    generator_provider_id: &'a str,
    questions: &'a [Question],
}

impl Battery {
    pub fn new(subject_id: &str, generator_provider_id: &str) -> Self {
        Self {
            subject_id: subject_id.into(),
            generator_provider_id: generator_provider_id.into(),
            questions: Vec::new(),
            checksum: None,
            checksum_algorithm: ChecksumAlgorithm::default(),
            frozen: false,
            leak_override: Vec::new(),
        }
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }
    pub fn generator_provider_id(&self) -> &str {
        &self.generator_provider_id
    }
    pub fn questions(&self) -> &[Question] {
        &self.questions
    }
    pub fn checksum(&self) -> Option<&str> {
        self.checksum.as_deref()
    }
    pub fn checksum_algorithm(&self) -> ChecksumAlgorithm {
        self.checksum_algorithm
    }
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
    pub fn leak_override(&self) -> &[String] {
        &self.leak_override
    }

    /// Questions entering the main analyses.
    pub fn behavioral(&self) -> impl Iterator<Item = &Question> {
        self.questions
            .iter()
            .filter(|q| q.tier == Tier::BehavioralPrediction)
    }

    fn ensure_mutable(&self) -> Result<()> {
        if self.frozen {
            Err(Error::AlreadyFrozen)
        } else {
            Ok(())
        }
    }

    pub fn push(&mut self, q: Question) -> Result<()> {
        self.ensure_mutable()?;
        self.questions.push(q);
        Ok(())
    }

    pub fn retain(&mut self, f: impl FnMut(&Question) -> bool) -> Result<()> {
        self.ensure_mutable()?;
        self.questions.retain(f);
        Ok(())
    }

    pub fn edit_question(&mut self, qid: &str, f: impl FnOnce(&mut Question)) -> Result<()> {
        self.ensure_mutable()?;
        let q = self
            .questions
            .iter_mut()
            .find(|q| q.qid == qid)
            .ok_or_else(|| Error::UnknownId(qid.into()))?;
        f(q);
        Ok(())
    }

    pub fn compute_checksum(&self, algorithm: ChecksumAlgorithm) -> Result<String> {
        canonical_digest(
            &ChecksumContent {
                subject_id: &self.subject_id,
                generator_provider_id: &self.generator_provider_id,
                questions: &self.questions,
            },
            algorithm,
        )
    }

    pub fn category_counts(&self) -> BTreeMap<Category, usize> {
        let mut m = BTreeMap::new();
        for q in self.behavioral() {
            *m.entry(q.category).or_insert(0) += 1;
        }
        m
    }

    pub fn to_json(&self) -> Result<String> {
        crate::digest::to_pretty_json(self)
    }

    /// Parse a frozen battery, verify its checksum and, when the held-out
    /// text is supplied, that every span still sits inside its window.
    pub fn load(json: &str, heldout: Option<&HeldoutText>) -> Result<Self> {
        let b: Battery = serde_json::from_str(json)?;
        if !b.frozen {
            return Err(Error::NotFrozen);
        }
        b.verify_checksum()?;
        if let Some(h) = heldout {
            verify_spans(&b, h)?;
        }
        Ok(b)
    }

    pub fn verify_checksum(&self) -> Result<()> {
        let expected = self.checksum.clone().ok_or(Error::NotFrozen)?;
        let found = self.compute_checksum(self.checksum_algorithm)?;
        if found != expected {
            return Err(Error::ChecksumMismatch { expected, found });
        }
        Ok(())
    }
}

fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let byte = |n: usize| text.char_indices().nth(n).map_or(text.len(), |(i, _)| i);
    let (s, e) = (byte(start), byte(end));
    &text[s..e.max(s)]
}

pub fn verify_spans(battery: &Battery, heldout: &HeldoutText) -> Result<()> {
    for q in battery.questions() {
        let ok = heldout.chapter(&q.window_ref.chapter_id).is_some_and(|c| {
            char_slice(&c.text, q.window_ref.char_start, q.window_ref.char_end).contains(&q.heldout_span)
        });
        if !ok {
            return Err(Error::SpanNotContained { qid: q.qid.clone() });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub batches: usize,
    pub per_batch: usize,
    pub window_chars: usize,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            batches: 4,
            per_batch: 10,
            window_chars: 5000,
        }
    }
}

/// A generation window in held-out coordinates (chars of the chapter texts
/// joined by blank lines).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

/// Non-overlapping windows of `window_chars` covering as much of a text of
/// `len` chars as fits; batch `b` shifts the tiling by an even share of the
/// leftover slack.
pub fn tile_windows(len: usize, window_chars: usize, batch: usize, batches: usize) -> Vec<Window> {
    if window_chars == 0 || len < window_chars {
        return Vec::new();
    }
    let n = len / window_chars;
    let slack = len - n * window_chars;
    let offset = if batches > 1 { slack * batch / (batches - 1) } else { 0 };
    (0..n)
        .map(|i| Window {
            start: offset + i * window_chars,
            end: offset + (i + 1) * window_chars,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedItem {
    pub batch: usize,
    pub window: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub battery: Battery,
    pub dropped: Vec<DroppedItem>,
}

#[derive(Deserialize)]
struct RawItem {
    #[serde(default)]
    stem: String,
    #[serde(default)]
    category: String,
    #[serde(default)]
    span: String,
    #[serde(default)]
    tier: Option<Tier>,
}

const SEPARATOR: &str = "\n\n";

/// Generate raw questions. Each batch tiles the held-out text with windows
/// and asks for an even share of the batch's questions per window. Items
/// whose span is not inside the window are dropped and logged.
pub fn generate_battery(
    heldout: &HeldoutText,
    client: &Client,
    cfg: &BatteryConfig,
    prompts: &PromptPack,
) -> Result<Generation> {
    // (chapter index, chapter start in joined chars)
    let mut offsets = Vec::new();
    let mut pos = 0usize;
    for (i, c) in heldout.chapters.iter().enumerate() {
        offsets.push((i, pos));
        pos += c.text.chars().count() + SEPARATOR.len();
    }
    let joined: Vec<char> = heldout.full_text().chars().collect();
    let total = joined.len();
    if total < cfg.window_chars || cfg.window_chars == 0 {
        return Err(Error::invalid(format!(
            "held-out text has {total} chars, shorter than one {}-char window",
            cfg.window_chars
        )));
    }
    let categories = Category::ALL.map(Category::as_str).join(", ");
    let mut battery = Battery::new(&heldout.subject_id, client.provider_id());
    let mut dropped = Vec::new();
    let mut serial = 0usize;

    for b in 0..cfg.batches {
        let windows = tile_windows(total, cfg.window_chars, b, cfg.batches);
        let n = windows.len();
        for (w, win) in windows.iter().enumerate() {
            let count = cfg.per_batch / n + usize::from(w < cfg.per_batch % n);
            if count == 0 {
                continue;
            }
            let text: String = joined[win.start..win.end].iter().collect();
            let mut vars = BTreeMap::new();
            vars.insert("window", format!("{}", b * n + w + 1));
            vars.insert("subject", heldout.subject_id.clone());
            vars.insert("count", count.to_string());
            vars.insert("categories", categories.clone());
            vars.insert("text", text.clone());
            let user = render(&prompts.generate_questions, &vars)?;
            let (raw, _) = client.generate(&Request::new(PromptKind::GenerateQuestions, "", user))?;
            let mut drop = |reason: String| {
                log::info!("batch {b} window {w}: dropped item ({reason})");
                dropped.push(DroppedItem {
                    batch: b,
                    window: w,
                    reason,
                })
            };
            let items: Vec<RawItem> = match serde_json::from_str(raw.trim()) {
                Ok(items) => items,
                Err(e) => {
                    drop(format!("unparseable output: {e}"));
                    continue;
                }
            };
            for item in items {
                let Ok(category) = item.category.parse::<Category>() else {
                    drop(format!("unknown category `{}`", item.category));
                    continue;
                };
                if item.stem.trim().is_empty() || item.span.trim().is_empty() {
                    drop("empty stem or span".into());
                    continue;
                }
                let Some(rel) = text.find(&item.span) else {
                    drop("span not found in window".into());
                    continue;
                };
                let span_start = win.start + text[..rel].chars().count();
                let span_end = span_start + item.span.chars().count();
                let Some(&(ci, cstart)) = offsets.iter().rev().find(|(_, s)| *s <= span_start) else {
                    drop("span outside held-out chapters".into());
                    continue;
                };
                let chapter = &heldout.chapters[ci];
                let clen = chapter.text.chars().count();
                if span_end > cstart + clen {
                    drop("span crosses a chapter boundary".into());
                    continue;
                }
                serial += 1;
                battery.push(Question {
                    qid: format!("{}-q{serial:03}", heldout.subject_id),
                    subject_id: heldout.subject_id.clone(),
                    tier: item.tier.unwrap_or(Tier::BehavioralPrediction),
                    category,
                    stem: item.stem.trim().to_string(),
                    heldout_span: item.span,
                    window_ref: WindowRef {
                        chapter_id: chapter.chapter_id.clone(),
                        char_start: win.start.saturating_sub(cstart),
                        char_end: (win.end - cstart).min(clen),
                    },
                })?;
            }
        }
    }
    if battery.questions().is_empty() {
        return Err(Error::NoValidQuestions);
    }
    Ok(Generation { battery, dropped })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTargets {
    pub total: usize,
    #[serde(default)]
    pub note: String,
    pub caps: BTreeMap<Category, usize>,
}

impl Default for CategoryTargets {
    fn default() -> Self {
        serde_json::from_str(include_str!("../data/category_targets.json"))
            .expect("bundled category targets are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub raw: usize,
    pub duplicates_removed: usize,
    pub capped: usize,
    pub final_count: usize,
    pub per_category: BTreeMap<Category, usize>,
}

fn stem_key(stem: &str) -> String {
    stem.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Remove case-folded duplicate stems (first wins), then cap each category
/// and the behavioral total in order of appearance. Supplementary tiers are
/// deduplicated but not capped.
pub fn dedup_and_cap(raw: &Battery, targets: &CategoryTargets) -> Result<(Battery, DedupReport)> {
    raw.ensure_mutable()?;
    let mut seen = HashSet::new();
    let mut per_category: BTreeMap<Category, usize> = BTreeMap::new();
    let mut out = Battery::new(raw.subject_id(), raw.generator_provider_id());
    let (mut dups, mut capped, mut total) = (0, 0, 0);
    for q in raw.questions() {
        if !seen.insert(stem_key(&q.stem)) {
            dups += 1;
            continue;
        }
        if q.tier == Tier::BehavioralPrediction {
            let cap = targets.caps.get(&q.category).copied().unwrap_or(usize::MAX);
            let n = per_category.entry(q.category).or_insert(0);
            if *n >= cap || total >= targets.total {
                capped += 1;
                continue;
            }
            *n += 1;
            total += 1;
        }
        out.push(q.clone())?;
    }
    let report = DedupReport {
        raw: raw.questions().len(),
        duplicates_removed: dups,
        capped,
        final_count: out.questions().len(),
        per_category,
    };
    Ok((out, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeOptions {
    pub algorithm: ChecksumAlgorithm,
    pub leak_ngram: usize,
    /// Log leaks instead of refusing to freeze (legacy replication only).
    pub allow_leaks: bool,
}

impl Default for FreezeOptions {
    fn default() -> Self {
        Self {
            algorithm: ChecksumAlgorithm::Md5,
            leak_ngram: DEFAULT_LEAK_NGRAM,
            allow_leaks: false,
        }
    }
}

/// Audit, verify spans, and freeze under a checksum.
pub fn freeze(mut battery: Battery, heldout: &HeldoutText, opts: FreezeOptions) -> Result<(Battery, LeakReport)> {
    battery.ensure_mutable()?;
    verify_spans(&battery, heldout)?;
    let report = leakage_audit(&battery, heldout, opts.leak_ngram)?;
    if !report.is_clean() {
        if !opts.allow_leaks {
            return Err(Error::LeakageBlock(report.leaking_question_ids.clone()));
        }
        for m in &report.matches {
            log::warn!("leak tolerated: {} shares `{}`", m.question_id, m.span_text);
            battery
                .leak_override
                .push(format!("{}: {}", m.question_id, m.span_text));
        }
    }
    battery.checksum = Some(battery.compute_checksum(opts.algorithm)?);
    battery.checksum_algorithm = opts.algorithm;
    battery.frozen = true;
    Ok((battery, report))
}
