//! Prompt templates. The response and judge templates are fixed text; the
//! authoring prompts live in a replaceable prompt pack.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// System message for response generation; `<subject>` is substituted.
pub const RESPONSE_SYSTEM_TEMPLATE: &str = "You are predicting how <subject> would respond to a specific question about their behavior, values, or reasoning. Answer in <subject>'s voice, grounded in their demonstrated patterns.";

/// Judge rubric. `{held_out}` and `{response}` are substituted; the response
/// is truncated before substitution.
pub const JUDGE_TEMPLATE: &str = "You are evaluating whether a response about a person PREDICTED what actually happened.

=== HELD-OUT GROUND TRUTH ===
{held_out}

=== RESPONSE ===
{response}

Rate 1-5:
5=Predicts specific outcome
4=General direction correct
3=Right domain wrong outcome
2=Wrong prediction
1=Refuses or off-base

Respond with ONLY a single digit (1-5).";

pub const JUDGE_RESPONSE_CHARS: usize = 1500;

pub const GROUND_TRUTH_HEADER: &str = "=== HELD-OUT GROUND TRUTH ===";
pub const RESPONSE_HEADER: &str = "=== RESPONSE ===";
pub const QUESTION_PREFIX: &str = "Question: ";

pub fn response_system_prompt(subject_name: &str) -> String {
    RESPONSE_SYSTEM_TEMPLATE.replace("<subject>", subject_name)
}

/// User message: context block (if any), blank line, then the question.
pub fn response_user_prompt(context: &str, question: &str) -> String {
    if context.is_empty() {
        format!("{QUESTION_PREFIX}{question}")
    } else {
        format!("{context}\n\n{QUESTION_PREFIX}{question}")
    }
}

/// Recover (ground truth, embedded response) from a rendered judge prompt.
pub fn split_judge_prompt(prompt: &str) -> Option<(&str, &str)> {
    let gt_start = prompt.find(GROUND_TRUTH_HEADER)? + GROUND_TRUTH_HEADER.len();
    let resp_at = prompt.find(RESPONSE_HEADER)?;
    let resp_start = resp_at + RESPONSE_HEADER.len();
    let resp_end = prompt.rfind("\n\nRate 1-5:")?;
    if resp_at < gt_start || resp_end < resp_start {
        return None;
    }
    Some((
        prompt[gt_start..resp_at].trim(),
        prompt[resp_start..resp_end].trim(),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptPack {
    pub version: String,
    #[serde(default)]
    pub note: String,
    pub domain_guard: String,
    pub extract: String,
    pub author_anchors: String,
    pub author_core: String,
    pub author_predictions: String,
    pub compose: String,
    pub generate_questions: String,
}

impl Default for PromptPack {
    fn default() -> Self {
        serde_json::from_str(include_str!("../data/prompt_pack.json"))
            .expect("bundled prompt pack is valid")
    }
}

impl PromptPack {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Substitute `{key}` placeholders. Unknown placeholders are an error so a
/// broken prompt pack fails loudly.
pub fn render(template: &str, vars: &BTreeMap<&str, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_key(&after[..close]) => {
                let key = &after[..close];
                let value = vars
                    .get(key)
                    .ok_or_else(|| Error::invalid(format!("prompt placeholder `{key}` unbound")))?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn is_key(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn system_prompt_substitutes_both_slots() {
        let s = response_system_prompt("Mary Seacole");
        assert_eq!(s.matches("Mary Seacole").count(), 2);
        assert!(!s.contains("<subject>"));
    }

    #[test]
    fn render_leaves_json_braces_alone() {
        let mut v = BTreeMap::new();
        v.insert("name", "x".to_string());
        assert_eq!(render("{name} {\"a\": 1}", &v).unwrap(), "x {\"a\": 1}");
        assert!(render("{missing}", &v).is_err());
    }

    #[test]
    fn bundled_pack_renders() {
        let p = PromptPack::default();
        assert!(p.author_anchors.contains("{domain_guard}"));
    }
}
