//! Rubric scoring across a judge panel, and the per-judge calibration
//! diagnostic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{JUDGE_RESPONSE_CHARS, JUDGE_TEMPLATE};
use crate::providers::{parse_judge_digit, CallRecord, Client, GenParams, PromptKind, Request};
use crate::runner::{ConditionId, ResponseRecord};

/// First `JUDGE_RESPONSE_CHARS` characters (not bytes) of a response.
pub fn truncate_response(response: &str) -> &str {
    match response.char_indices().nth(JUDGE_RESPONSE_CHARS) {
        Some((i, _)) => &response[..i],
        None => response,
    }
}

pub fn build_judge_prompt(heldout_span: &str, response_text: &str) -> String {
    JUDGE_TEMPLATE
        .replace("{held_out}", heldout_span)
        .replace("{response}", truncate_response(response_text))
}

/// The only subject context a judge receives.
pub fn judge_system_prompt(subject_name: &str, source_title: &str) -> String {
    format!("The person is {subject_name}. Source: {source_title}.")
}

pub fn judge_request(subject_name: &str, source_title: &str, heldout_span: &str, response_text: &str) -> Request {
    Request {
        kind: PromptKind::Judge,
        system: judge_system_prompt(subject_name, source_title),
        user: build_judge_prompt(heldout_span, response_text),
        params: GenParams::STUDY,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub subject_id: String,
    pub qid: String,
    pub condition: ConditionId,
    pub judge_id: String,
    /// `None` marks an invalid or failed judgment.
    pub score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_raw: Option<String>,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelDef {
    pub primary: Vec<String>,
    #[serde(default)]
    pub sensitivity: Vec<String>,
}

impl PanelDef {
    pub fn primary(judges: &[&str]) -> Self {
        Self {
            primary: judges.iter().map(|s| s.to_string()).collect(),
            sensitivity: vec![],
        }
    }

    pub fn all_judges(&self) -> impl Iterator<Item = &String> {
        self.primary.iter().chain(&self.sensitivity)
    }

    fn validate(&self) -> Result<()> {
        if self.primary.is_empty() {
            return Err(Error::invalid("primary panel needs at least one judge"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Absence {
    pub subject_id: String,
    pub condition: ConditionId,
    pub qid: String,
    pub judge_id: String,
    pub reason: String,
}

type QidScores = BTreeMap<String, BTreeMap<String, u8>>;

/// subject → condition → qid → judge → score. Missing judgments are listed
/// in `absences` and never filled.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCube {
    pub panel: PanelDef,
    pub scores: BTreeMap<String, BTreeMap<ConditionId, QidScores>>,
    pub absences: Vec<Absence>,
}

impl ScoreCube {
    pub fn new(panel: PanelDef) -> Self {
        Self {
            panel,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, subject_id: &str, condition: ConditionId, qid: &str, judge_id: &str, score: u8) {
        self.scores
            .entry(subject_id.into())
            .or_default()
            .entry(condition)
            .or_default()
            .entry(qid.into())
            .or_default()
            .insert(judge_id.into(), score);
    }

    pub fn record_absence(&mut self, subject_id: &str, condition: ConditionId, qid: &str, judge_id: &str, reason: &str) {
        self.absences.push(Absence {
            subject_id: subject_id.into(),
            condition,
            qid: qid.into(),
            judge_id: judge_id.into(),
            reason: reason.into(),
        });
    }

    pub fn cell(&self, subject_id: &str, condition: ConditionId) -> Option<&QidScores> {
        self.scores.get(subject_id)?.get(&condition)
    }

    pub fn get(&self, subject_id: &str, condition: ConditionId, qid: &str, judge_id: &str) -> Option<u8> {
        self.cell(subject_id, condition)?.get(qid)?.get(judge_id).copied()
    }

    /// Primary judges that scored at least one question in the cell.
    pub fn effective_panel(&self, subject_id: &str, condition: ConditionId) -> usize {
        let Some(cell) = self.cell(subject_id, condition) else { return 0 };
        let present: BTreeSet<&String> = cell.values().flat_map(|m| m.keys()).collect();
        self.panel.primary.iter().filter(|j| present.contains(j)).count()
    }

    pub fn subjects(&self) -> impl Iterator<Item = &String> {
        self.scores.keys()
    }

    pub fn conditions(&self) -> BTreeSet<ConditionId> {
        self.scores.values().flat_map(|m| m.keys().copied()).collect()
    }

    pub fn n_scores(&self) -> usize {
        self.scores
            .values()
            .flat_map(|m| m.values())
            .flat_map(|m| m.values())
            .map(|m| m.len())
            .sum()
    }
}

/// Per-subject context for the judge system message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectContext {
    pub name: String,
    pub source_title: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PanelOptions {
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelOutcome {
    pub cube: ScoreCube,
    pub judgments: Vec<Judgment>,
}

impl PanelOutcome {
    /// judge_id → judgments for one (subject, condition).
    pub fn judgments_by_judge(&self, subject_id: &str, condition: ConditionId) -> BTreeMap<String, Vec<Judgment>> {
        let mut m: BTreeMap<String, Vec<Judgment>> = BTreeMap::new();
        for j in &self.judgments {
            if j.subject_id == subject_id && j.condition == condition {
                m.entry(j.judge_id.clone()).or_default().push(j.clone());
            }
        }
        m
    }
}

fn judge_once(judge: &Client, request: &Request, lenient: bool) -> Result<(Option<u8>, Option<String>, Vec<CallRecord>)> {
    let mut calls = Vec::new();
    let mut last_raw = None;
    for _ in 0..2 {
        let rec = judge.call(request)?;
        let failed = rec.is_failed();
        let raw = rec.response_text.clone();
        calls.push(rec);
        if failed {
            return Ok((None, None, calls));
        }
        match parse_judge_digit(&raw, lenient) {
            Ok(d) => return Ok((Some(d), None, calls)),
            Err(_) => last_raw = Some(raw),
        }
    }
    Ok((None, last_raw, calls))
}

/// Score every response with every judge. `spans` maps (subject, qid) to
/// the held-out span. Responses whose generation failed are recorded as
/// absent for every judge.
pub fn run_panel(
    responses: &[ResponseRecord],
    spans: &BTreeMap<(String, String), String>,
    subjects: &BTreeMap<String, SubjectContext>,
    judges: &[Client],
    panel: &PanelDef,
    opts: PanelOptions,
) -> Result<PanelOutcome> {
    panel.validate()?;
    for id in panel.all_judges() {
        if !judges.iter().any(|j| j.provider_id() == id) {
            return Err(Error::invalid(format!("panel judge `{id}` has no client")));
        }
    }
    let active: Vec<&Client> = judges
        .iter()
        .filter(|j| panel.all_judges().any(|id| id == j.provider_id()))
        .collect();

    let mut jobs = Vec::new();
    for r in responses {
        for j in &active {
            jobs.push((r, *j));
        }
    }
    let work = |(r, judge): &(&ResponseRecord, &Client)| -> Result<Judgment> {
        let mut out = Judgment {
            subject_id: r.subject_id.clone(),
            qid: r.qid.clone(),
            condition: r.condition,
            judge_id: judge.provider_id().to_string(),
            score: None,
            invalid_raw: None,
            calls: vec![],
        };
        if r.call.is_failed() || r.response_text.trim().is_empty() {
            return Ok(out);
        }
        let span = spans
            .get(&(r.subject_id.clone(), r.qid.clone()))
            .ok_or_else(|| Error::invalid(format!("no held-out span for {}/{}", r.subject_id, r.qid)))?;
        let ctx = subjects
            .get(&r.subject_id)
            .ok_or_else(|| Error::invalid(format!("no subject context for {}", r.subject_id)))?;
        let request = judge_request(&ctx.name, &ctx.source_title, span, &r.response_text);
        let (score, raw, calls) = judge_once(judge, &request, opts.lenient)?;
        out.score = score;
        out.invalid_raw = raw;
        out.calls = calls;
        Ok(out)
    };

    #[cfg(feature = "parallel")]
    let judgments: Vec<Judgment> = {
        use rayon::prelude::*;
        jobs.par_iter().map(work).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let judgments: Vec<Judgment> = jobs.iter().map(work).collect::<Result<_>>()?;

    let mut cube = ScoreCube::new(panel.clone());
    for (j, (r, _)) in judgments.iter().zip(&jobs) {
        match j.score {
            Some(s) => cube.insert(&j.subject_id, j.condition, &j.qid, &j.judge_id, s),
            None => {
                let reason = if r.call.is_failed() {
                    "response generation failed"
                } else if j.invalid_raw.is_some() {
                    "invalid judge output after retry"
                } else {
                    "judge call failed"
                };
                cube.record_absence(&j.subject_id, j.condition, &j.qid, &j.judge_id, reason);
            }
        }
    }
    Ok(PanelOutcome { cube, judgments })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationFixture {
    pub ground_truth: String,
    pub paraphrase: String,
    pub first_sentence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationFixtures {
    pub version: String,
    pub padding: String,
    pub fixtures: Vec<CalibrationFixture>,
}

impl Default for CalibrationFixtures {
    fn default() -> Self {
        serde_json::from_str(include_str!("../data/calibration_fixtures.json")).expect("shipped calibration fixtures parse")
    }
}

impl CalibrationFixtures {
    pub fn long_correct(&self, f: &CalibrationFixture) -> String {
        format!("{} {}", f.ground_truth, self.padding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationThresholds {
    pub verbatim_min: f64,
    pub paraphrase_min: f64,
    pub short_max: f64,
    pub long_min: f64,
}

impl Default for CalibrationThresholds {
    fn default() -> Self {
        Self {
            verbatim_min: 4.9,
            paraphrase_min: 4.5,
            short_max: 4.6,
            long_min: 4.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationFlags {
    pub verbatim: bool,
    pub paraphrased: bool,
    pub short_correct: bool,
    pub long_correct: bool,
}

impl CalibrationFlags {
    pub fn all(&self) -> bool {
        self.verbatim && self.paraphrased && self.short_correct && self.long_correct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub judge_id: String,
    pub repetitions: usize,
    pub verbatim: f64,
    pub paraphrased: f64,
    pub short_correct: f64,
    pub long_correct: f64,
    pub pass: CalibrationFlags,
    pub n_invalid: usize,
}

pub const DEFAULT_CALIBRATION_REPS: usize = 20;

/// Run the four synthetic tests `repetitions` times each, cycling through
/// the fixture set. Calls are sequential so a stateful judge sees a fixed
/// order.
pub fn calibration_diagnostic(
    judge: &Client,
    fixtures: &CalibrationFixtures,
    repetitions: usize,
    thresholds: CalibrationThresholds,
) -> Result<CalibrationReport> {
    if fixtures.fixtures.is_empty() || repetitions == 0 {
        return Err(Error::invalid("calibration needs fixtures and at least one repetition"));
    }
    let mut n_invalid = 0;
    let mut run = |make: &dyn Fn(&CalibrationFixture) -> String| -> Result<f64> {
        let mut total = 0u32;
        let mut n = 0u32;
        for rep in 0..repetitions {
            let f = &fixtures.fixtures[rep % fixtures.fixtures.len()];
            let req = judge_request("the subject", "a synthetic calibration source", &f.ground_truth, &make(f));
            let (score, _, calls) = judge_once(judge, &req, false)?;
            match score {
                Some(s) => {
                    total += u32::from(s);
                    n += 1;
                }
                None => {
                    if calls.last().is_some_and(|c| c.is_failed()) {
                        let c = calls.last().expect("checked");
                        return Err(Error::ProviderFailure {
                            provider: c.provider_id.clone(),
                            attempts: c.attempts,
                            message: c.error.clone().unwrap_or_default(),
                        });
                    }
                    n_invalid += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::InvalidJudgeOutput(format!("{}: no valid calibration scores", judge.provider_id())));
        }
        Ok(f64::from(total) / f64::from(n))
    };
    let verbatim = run(&|f| f.ground_truth.clone())?;
    let paraphrased = run(&|f| f.paraphrase.clone())?;
    let short_correct = run(&|f| f.first_sentence.clone())?;
    let long_correct = run(&|f| fixtures.long_correct(f))?;
    let t = thresholds;
    Ok(CalibrationReport {
        judge_id: judge.provider_id().to_string(),
        repetitions,
        verbatim,
        paraphrased,
        short_correct,
        long_correct,
        pass: CalibrationFlags {
            verbatim: verbatim >= t.verbatim_min,
            paraphrased: paraphrased >= t.paraphrase_min,
            short_correct: short_correct <= t.short_max,
            long_correct: long_correct >= t.long_min,
        },
        n_invalid,
    })
}
