//! A deterministic provider that understands every prompt kind well enough
//! to drive the full pipeline offline. Its outputs are simple functions of
//! the prompt text; nothing about them is meant to be realistic.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use super::{CallError, Capability, ModelProvider, PromptKind, Request};
use crate::battery::Category;
use crate::prompts::{split_judge_prompt, QUESTION_PREFIX};
use crate::text::audit_tokens;

const REFUSAL: &str = "I don't have specific information about how I acted in this situation.";

/// (cue, predicate, tier)
const CUES: &[(&str, &str, Option<&str>)] = &[
    ("i always ", "repeatedly_engages_in", None),
    ("i never ", "avoids", None),
    ("i refused to ", "refuses_to", None),
    ("i valued ", "values", Some("identity")),
    ("i value ", "values", Some("identity")),
    ("i feared ", "fears", Some("identity")),
    ("i fear ", "fears", Some("identity")),
    ("i loved ", "loves", Some("identity")),
    ("i love ", "loves", Some("identity")),
    ("i hated ", "hates", Some("identity")),
    ("i wanted to ", "wants_to", None),
    ("i trusted ", "trusts", None),
    ("i preferred ", "prefers", None),
    ("i learned ", "learned_from", None),
    ("i attended ", "attended", None),
    ("i mused about ", "muses_about", None),
];

pub struct ToyProvider {
    id: String,
    judge_offset: i32,
}

impl ToyProvider {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.into(),
            judge_offset: 0,
        }
    }

    /// Shift every judge score by `offset` (before clamping), so several toy
    /// judges can disagree.
    pub fn with_judge_offset(mut self, offset: i32) -> Self {
        self.judge_offset = offset;
        self
    }

    fn judge(&self, user: &str) -> Result<String, CallError> {
        let (gt, resp) =
            split_judge_prompt(user).ok_or_else(|| CallError::Fatal("malformed judge prompt".into()))?;
        if resp.starts_with("I don't have") || resp.trim().is_empty() {
            return Ok("1".into());
        }
        let content = |s: &str| -> BTreeSet<String> {
            audit_tokens(s).into_iter().filter(|t| t.len() >= 4).collect()
        };
        let g = content(gt);
        let r = content(resp);
        let recall = if g.is_empty() {
            0.0
        } else {
            g.intersection(&r).count() as f64 / g.len() as f64
        };
        let base = 2 + (recall * 6.0).round() as i32;
        Ok((base + self.judge_offset).clamp(1, 5).to_string())
    }
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Sentence slices of `text`, each a verbatim substring.
fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn section<'a>(text: &'a str, header: &str, next: Option<&str>) -> &'a str {
    let Some(at) = text.find(header) else {
        return "";
    };
    let body = &text[at + header.len()..];
    match next.and_then(|n| body.find(n)) {
        Some(end) => &body[..end],
        None => body,
    }
}

/// Parse `- F-<n> | predicate | object` lines.
fn fact_lines(text: &str) -> Vec<(String, String, String)> {
    text.lines()
        .filter_map(|l| {
            let l = l.trim().strip_prefix("- ")?;
            let mut parts = l.splitn(3, " | ");
            let id = parts.next()?.trim();
            if !id.starts_with("F-") {
                return None;
            }
            Some((id.into(), parts.next()?.trim().into(), parts.next()?.trim().into()))
        })
        .collect()
}

fn extract(user: &str) -> String {
    let passage = user
        .rfind("Passage ")
        .and_then(|i| user[i..].find(":\n").map(|j| &user[i + j + 2..]))
        .unwrap_or("");
    let mut ops = Vec::new();
    for sentence in sentences(passage) {
        let lower = sentence.to_lowercase();
        for (cue, predicate, tier) in CUES {
            if let Some(at) = lower.find(cue) {
                let object: String = lower[at + cue.len()..]
                    .trim_end_matches(['.', '!', '?'])
                    .split_whitespace()
                    .take(10)
                    .collect::<Vec<_>>()
                    .join(" ");
                if object.is_empty() {
                    continue;
                }
                let mut op = json!({
                    "op": "ADD",
                    "predicate": predicate,
                    "object": object,
                    "rationale": format!("cue `{}`", cue.trim()),
                });
                if let Some(t) = tier {
                    op["tier"] = json!(t);
                }
                ops.push(op);
                break;
            }
        }
    }
    serde_json::to_string_pretty(&ops).expect("json")
}

fn grouped(facts: &[(String, String, String)]) -> BTreeMap<&str, Vec<&(String, String, String)>> {
    let mut g: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for f in facts {
        g.entry(f.1.as_str()).or_default().push(f);
    }
    g
}

fn author_anchors(user: &str) -> String {
    let facts = fact_lines(section(user, "Facts:\n", None));
    let mut groups: Vec<_> = grouped(&facts).into_iter().collect();
    groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
    let mut out = String::from("# Anchors\n");
    let mut prov = String::new();
    for (i, (pred, items)) in groups.iter().take(3).enumerate() {
        let id = format!("A{}", i + 1);
        let objects: Vec<&str> = items.iter().map(|f| f.2.as_str()).collect();
        out.push_str(&format!(
            "\n## {id}: {}\n\nThe subject {} {}.\n",
            pred.replace('_', " "),
            pred.replace('_', " "),
            objects.join("; ")
        ));
        let ids: Vec<&str> = items.iter().map(|f| f.0.as_str()).collect();
        prov.push_str(&format!("{id}: {}\n", ids.join(", ")));
    }
    out.push_str(&format!("\n```provenance\n{prov}```\n"));
    out
}

fn author_core(user: &str) -> String {
    let facts = fact_lines(section(user, "Facts:\n", None));
    let mut out = String::from("# Core\n\n");
    for (pred, items) in grouped(&facts) {
        let objects: Vec<&str> = items.iter().map(|f| f.2.as_str()).collect();
        out.push_str(&format!(
            "Day to day, the subject {} {}. ",
            pred.replace('_', " "),
            objects.join(" and ")
        ));
    }
    out.trim_end().to_string() + "\n"
}

fn author_predictions(user: &str) -> String {
    let facts = fact_lines(section(user, "Facts:\n", None));
    let mut out = String::from("# Predictions\n");
    let mut prov = String::new();
    for (i, f) in facts.iter().take(6).enumerate() {
        let id = format!("P{}", i + 1);
        out.push_str(&format!(
            "\n## {id}: when {} is at stake\n\nExpect the subject to act as one who {} {}.\n",
            f.2,
            f.1.replace('_', " "),
            f.2
        ));
        prov.push_str(&format!("{id}: {}\n", f.0));
    }
    out.push_str(&format!("\n```provenance\n{prov}```\n"));
    out
}

fn body_lines(text: &str) -> Vec<&str> {
    let mut in_fence = false;
    text.lines()
        .filter(|l| {
            if l.trim_start().starts_with("```") {
                in_fence = !in_fence;
                return false;
            }
            !in_fence && !l.trim().is_empty() && !l.trim_start().starts_with('#')
        })
        .map(str::trim)
        .collect()
}

fn compose(user: &str) -> String {
    let anchors = section(user, "=== ANCHORS ===", Some("=== CORE ==="));
    let predictions = section(user, "=== PREDICTIONS ===", Some("=== IDENTITY FACTS ==="));
    let mut lines = body_lines(anchors);
    lines.extend(body_lines(predictions));
    let joined = lines.join(" ");
    let words: Vec<&str> = joined.split_whitespace().take(160).collect();
    format!("Taken together, {}\n", words.join(" "))
}

fn number_after(text: &str, prefix: &str) -> Option<usize> {
    let at = text.find(prefix)? + prefix.len();
    text[at..]
        .split(|c: char| !c.is_ascii_digit())
        .next()?
        .parse()
        .ok()
}

fn generate_questions(user: &str) -> String {
    let window_no = number_after(user, "Window ").unwrap_or(0);
    let count = number_after(user, "Write ").unwrap_or(1);
    let window = section(user, "=== WINDOW ===\n", Some("\n=== END WINDOW ==="));
    let candidates: Vec<&str> = sentences(window)
        .into_iter()
        .filter(|s| s.split_whitespace().count() >= 6)
        .collect();
    if candidates.is_empty() {
        return "[]".into();
    }
    let stride = (candidates.len() / count.max(1)).max(1);
    let items: Vec<_> = (0..count)
        .map(|k| {
            let span = candidates[(k * stride) % candidates.len()];
            let category = Category::ALL[(fnv(span) % Category::ALL.len() as u64) as usize];
            json!({
                "stem": format!(
                    "Question {window_no}.{k}: faced with a matter of {}, what would the subject do?",
                    category.as_str().replace('_', " ")
                ),
                "category": category.as_str(),
                "span": span,
            })
        })
        .collect();
    serde_json::to_string_pretty(&items).expect("json")
}

fn respond(user: &str) -> String {
    let (context, question) = match user.rfind(&format!("\n\n{QUESTION_PREFIX}")) {
        Some(i) => (&user[..i], &user[i + 2 + QUESTION_PREFIX.len()..]),
        None => ("", user.strip_prefix(QUESTION_PREFIX).unwrap_or(user)),
    };
    let lines = body_lines(context);
    let pool: Vec<&str> = lines.iter().flat_map(|l| sentences(l)).collect();
    if pool.is_empty() {
        return REFUSAL.into();
    }
    let start = (fnv(question) % pool.len() as u64) as usize;
    let picked: Vec<&str> = (0..3.min(pool.len()))
        .map(|k| pool[(start + k) % pool.len()])
        .collect();
    format!("I would answer from what I know of myself: {}", picked.join(" "))
}

impl ModelProvider for ToyProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Vec<Capability> {
        vec![Capability::Generate, Capability::Judge, Capability::Embed]
    }

    fn complete(&self, request: &Request) -> Result<String, CallError> {
        let u = request.user.as_str();
        Ok(match request.kind {
            PromptKind::Extract => extract(u),
            PromptKind::AuthorAnchors => author_anchors(u),
            PromptKind::AuthorCore => author_core(u),
            PromptKind::AuthorPredictions => author_predictions(u),
            PromptKind::Compose => compose(u),
            PromptKind::GenerateQuestions => generate_questions(u),
            PromptKind::Respond => respond(u),
            PromptKind::Judge => return self.judge(u),
        })
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, CallError> {
        super::HashedEmbedder::new(&self.id, 64).embed_batch(texts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentences_are_verbatim_slices() {
        let t = "One two.  Three four!\nFive";
        let s = sentences(t);
        assert_eq!(s, vec!["One two.", "Three four!", "Five"]);
        assert!(s.iter().all(|x| t.contains(x)));
    }

    #[test]
    fn extract_emits_cued_triples() {
        let out = extract("Passage ch001-p001:\nI value honest work above all. The rain fell.");
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 1);
        assert_eq!(v[0]["predicate"], "values");
        assert_eq!(v[0]["object"], "honest work above all");
    }

    #[test]
    fn judge_rewards_overlap() {
        let p = ToyProvider::new("j");
        let prompt = crate::judging::build_judge_prompt(
            "He walked to the harbour alone at midnight.",
            "He walked to the harbour alone at midnight.",
        );
        assert_eq!(p.judge(&prompt).unwrap(), "5");
        let prompt = crate::judging::build_judge_prompt("He walked to the harbour.", REFUSAL);
        assert_eq!(p.judge(&prompt).unwrap(), "1");
    }
}
