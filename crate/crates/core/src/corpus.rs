//! Source corpora: import, chapter split, and the train/held-out boundary.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::battery::Battery;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::text::{word_count, NgramIndex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chapter {
    pub chapter_id: String,
    /// The marker line that opened the chapter, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub subject_id: String,
    pub title: String,
    pub chapters: Vec<Chapter>,
    pub word_count: usize,
    pub source_ref: String,
}

impl Corpus {
    pub fn chapter(&self, id: &str) -> Option<&Chapter> {
        self.chapters.iter().find(|c| c.chapter_id == id)
    }

    /// Concatenated text of the given chapters, in the given order.
    pub fn text_of(&self, ids: &[String]) -> String {
        ids.iter()
            .filter_map(|id| self.chapter(id))
            .map(|c| c.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

/// A chapter-boundary detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "pattern", rename_all = "snake_case")]
pub enum ChapterMarker {
    /// Line starts with this text (case-insensitive, after leading whitespace).
    Prefix(String),
    /// Line matches this regular expression.
    Regex(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportConfig {
    pub markers: Vec<ChapterMarker>,
    pub single_chapter_fallback: bool,
    /// Keep only the text between Project Gutenberg START/END lines when present.
    pub strip_gutenberg: bool,
    /// Additional line patterns removed before chapter detection.
    #[serde(default)]
    pub boilerplate: Vec<String>,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub source_ref: String,
}

impl Default for ImportConfig {
    fn default() -> Self {
        Self {
            markers: vec![
                ChapterMarker::Prefix("CHAPTER".into()),
                ChapterMarker::Regex(r"^(?:BOOK|PART)\s+[IVXLC0-9]+\b".into()),
            ],
            single_chapter_fallback: false,
            strip_gutenberg: true,
            boilerplate: Vec::new(),
            title: String::new(),
            source_ref: String::new(),
        }
    }
}

enum CompiledMarker {
    Prefix(String),
    Regex(Regex),
}

impl CompiledMarker {
    fn matches(&self, line: &str) -> bool {
        let t = line.trim_start();
        match self {
            CompiledMarker::Prefix(p) => t
                .get(..p.len())
                .is_some_and(|head| head.eq_ignore_ascii_case(p)),
            CompiledMarker::Regex(re) => re.is_match(t),
        }
    }
}

fn normalize(raw: &str, cfg: &ImportConfig) -> Result<String> {
    let mut text = crate::digest::normalize_newlines(raw);
    if cfg.strip_gutenberg {
        text = strip_gutenberg(&text);
    }
    if !cfg.boilerplate.is_empty() {
        let res = cfg
            .boilerplate
            .iter()
            .map(|p| Regex::new(p))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        text = text
            .lines()
            .filter(|l| !res.iter().any(|re| re.is_match(l)))
            .collect::<Vec<_>>()
            .join("\n");
    }
    // runs of more than two spaces/tabs collapse to one space; more than two
    // newlines collapse to a paragraph break
    let spaces = Regex::new(r"[ \t]{3,}").expect("static regex");
    let newlines = Regex::new(r"\n[ \t]*\n(?:[ \t]*\n)+").expect("static regex");
    let text = spaces.replace_all(&text, " ");
    let text = newlines.replace_all(&text, "\n\n");
    Ok(text.trim().to_string())
}

fn strip_gutenberg(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let start = lines
        .iter()
        .position(|l| l.starts_with("*** START OF"))
        .map(|i| i + 1);
    let end = lines.iter().position(|l| l.starts_with("*** END OF"));
    match (start, end) {
        (None, None) => text.to_string(),
        (s, e) => {
            let s = s.unwrap_or(0);
            let e = e.unwrap_or(lines.len()).max(s);
            lines[s..e].join("\n")
        }
    }
}

/// Normalize `raw_text` and cut it into chapters at marker lines.
///
/// Text before the first marker is front matter and is dropped. Marker lines
/// are kept as chapter headings, not as chapter text; chapters whose body is
/// empty (table-of-contents entries) are dropped.
pub fn import_corpus(raw_text: &str, subject_id: &str, cfg: &ImportConfig) -> Result<Corpus> {
    if raw_text.trim().is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let text = normalize(raw_text, cfg)?;
    if text.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let markers = cfg
        .markers
        .iter()
        .map(|m| {
            Ok(match m {
                ChapterMarker::Prefix(p) => CompiledMarker::Prefix(p.clone()),
                ChapterMarker::Regex(r) => CompiledMarker::Regex(Regex::new(r)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut raw_chapters: Vec<(String, Vec<&str>)> = Vec::new();
    let mut saw_marker = false;
    for line in text.lines() {
        if markers.iter().any(|m| m.matches(line)) {
            saw_marker = true;
            raw_chapters.push((line.trim().to_string(), Vec::new()));
        } else if let Some((_, body)) = raw_chapters.last_mut() {
            body.push(line);
        }
    }

    let chapters: Vec<Chapter> = if saw_marker {
        raw_chapters
            .into_iter()
            .filter_map(|(heading, body)| {
                let body = body.join("\n").trim().to_string();
                (!body.is_empty()).then_some((heading, body))
            })
            .enumerate()
            .map(|(i, (heading, text))| Chapter {
                chapter_id: format!("ch{:03}", i + 1),
                heading: Some(heading),
                text,
            })
            .collect()
    } else if cfg.single_chapter_fallback {
        vec![Chapter {
            chapter_id: "ch001".into(),
            heading: None,
            text: text.clone(),
        }]
    } else {
        return Err(Error::NoChapterBoundary);
    };
    if chapters.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let word_count = chapters.iter().map(|c| word_count(&c.text)).sum();
    Ok(Corpus {
        subject_id: subject_id.to_string(),
        title: cfg.title.clone(),
        chapters,
        word_count,
        source_ref: cfg.source_ref.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub subject_id: String,
    pub training: Vec<String>,
    pub heldout: Vec<String>,
    pub ratio: f64,
    /// Training share of words actually achieved by the boundary.
    pub achieved_share: f64,
    pub split_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub ratio: f64,
    /// Permit ratio 0 or 1 (all held-out / all training). Off for study runs.
    pub allow_degenerate: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            allow_degenerate: false,
        }
    }
}

/// Hex SHA-256 over the ordered partition, `training:<ids>\nheldout:<ids>`.
pub fn partition_digest(training: &[String], heldout: &[String]) -> String {
    sha256_hex(format!(
        "training:{}\nheldout:{}",
        training.join(","),
        heldout.join(",")
    ))
}

/// Contiguous-prefix split choosing the chapter boundary whose training
/// word share is closest to `ratio` (earliest boundary on ties).
pub fn split_corpus(corpus: &Corpus, opts: SplitOptions) -> Result<CorpusSplit> {
    let ratio = opts.ratio;
    if !(0.0..=1.0).contains(&ratio) || ratio.is_nan() {
        return Err(Error::invalid(format!("split ratio {ratio} outside [0, 1]")));
    }
    let n = corpus.chapters.len();
    let ids: Vec<String> = corpus.chapters.iter().map(|c| c.chapter_id.clone()).collect();
    let words: Vec<usize> = corpus.chapters.iter().map(|c| word_count(&c.text)).collect();
    let total: usize = words.iter().sum();

    let boundary = if ratio == 0.0 || ratio == 1.0 {
        if !opts.allow_degenerate {
            return Err(Error::DegenerateRatio { ratio });
        }
        if ratio == 0.0 {
            0
        } else {
            n
        }
    } else {
        if n < 2 {
            return Err(Error::SingleChapterUnsplittable { ratio });
        }
        let mut best = (1usize, f64::INFINITY);
        let mut cum = 0usize;
        for (k, w) in words.iter().enumerate().take(n - 1) {
            cum += w;
            let share = cum as f64 / total.max(1) as f64;
            let dev = (share - ratio).abs();
            if dev < best.1 {
                best = (k + 1, dev);
            }
        }
        best.0
    };

    let training = ids[..boundary].to_vec();
    let heldout = ids[boundary..].to_vec();
    let train_words: usize = words[..boundary].iter().sum();
    Ok(CorpusSplit {
        subject_id: corpus.subject_id.clone(),
        split_digest: partition_digest(&training, &heldout),
        training,
        heldout,
        ratio,
        achieved_share: if total == 0 {
            0.0
        } else {
            train_words as f64 / total as f64
        },
    })
}

/// The held-out half of a corpus. Used for battery generation, span
/// verification and leakage scans; never served to a response provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldoutText {
    pub subject_id: String,
    pub chapters: Vec<Chapter>,
}

impl HeldoutText {
    pub fn from_split(corpus: &Corpus, split: &CorpusSplit) -> Self {
        Self {
            subject_id: corpus.subject_id.clone(),
            chapters: split
                .heldout
                .iter()
                .filter_map(|id| corpus.chapter(id).cloned())
                .collect(),
        }
    }

    /// A single-chapter held-out text, mostly for tests.
    pub fn single(subject_id: &str, text: &str) -> Self {
        Self {
            subject_id: subject_id.into(),
            chapters: vec![Chapter {
                chapter_id: "ch001".into(),
                heading: None,
                text: text.into(),
            }],
        }
    }

    pub fn chapter(&self, id: &str) -> Option<&Chapter> {
        self.chapters.iter().find(|c| c.chapter_id == id)
    }

    pub fn full_text(&self) -> String {
        self.chapters
            .iter()
            .map(|c| c.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    pub fn ngram_index(&self, n: usize) -> NgramIndex {
        let mut idx = NgramIndex::new(n);
        for c in &self.chapters {
            idx.add(&c.chapter_id, &c.text);
        }
        idx
    }
}

pub fn training_text(corpus: &Corpus, split: &CorpusSplit) -> String {
    corpus.text_of(&split.training)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakMatch {
    pub question_id: String,
    pub span_text: String,
    pub heldout_chapter_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakReport {
    pub n_gram: usize,
    pub leaking_question_ids: Vec<String>,
    pub matches: Vec<LeakMatch>,
}

impl LeakReport {
    pub fn is_clean(&self) -> bool {
        self.leaking_question_ids.is_empty()
    }
}

pub const DEFAULT_LEAK_NGRAM: usize = 7;

/// Scan every question stem for runs of `n` or more consecutive tokens that
/// also occur in the held-out text. Held-out spans stored alongside the
/// questions are not scanned.
pub fn leakage_audit(battery: &Battery, heldout: &HeldoutText, n: usize) -> Result<LeakReport> {
    if n < 3 {
        return Err(Error::invalid("leakage audit n-gram length must be at least 3"));
    }
    let idx = heldout.ngram_index(n);
    let mut report = LeakReport {
        n_gram: n,
        leaking_question_ids: Vec::new(),
        matches: Vec::new(),
    };
    for q in battery.questions() {
        let spans = idx.matching_spans(&q.stem);
        if spans.is_empty() {
            continue;
        }
        report.leaking_question_ids.push(q.qid.clone());
        report
            .matches
            .extend(spans.into_iter().map(|(span_text, chapter)| LeakMatch {
                question_id: q.qid.clone(),
                span_text,
                heldout_chapter_id: chapter,
            }));
    }
    Ok(report)
}
