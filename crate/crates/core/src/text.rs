//! Tokenization shared by the leakage audit, the isolation scan and the
//! size estimators.

use std::collections::HashMap;

/// Whitespace-token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Case-folded, punctuation-stripped tokens. A token is a maximal
/// whitespace-delimited run with every non-alphanumeric character removed;
/// runs that become empty are dropped.
pub fn audit_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let t: String = raw
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect();
            (!t.is_empty()).then_some(t)
        })
        .collect()
}

/// Index of every n-gram in a token stream, keyed by the joined n-gram and
/// mapping to the label of the first source it was seen in.
pub struct NgramIndex {
    n: usize,
    grams: HashMap<String, String>,
}

impl NgramIndex {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            grams: HashMap::new(),
        }
    }

    pub fn add(&mut self, label: &str, text: &str) {
        let toks = audit_tokens(text);
        if toks.len() < self.n {
            return;
        }
        for w in toks.windows(self.n) {
            self.grams
                .entry(w.join(" "))
                .or_insert_with(|| label.to_string());
        }
    }

    /// Maximal runs of `probe` whose every n-gram occurs in the index, as
    /// (span text, label of the first matching n-gram).
    pub fn matching_spans(&self, probe: &str) -> Vec<(String, String)> {
        let toks = audit_tokens(probe);
        if toks.len() < self.n {
            return Vec::new();
        }
        let hits: Vec<Option<&String>> = toks
            .windows(self.n)
            .map(|w| self.grams.get(&w.join(" ")))
            .collect();
        let mut spans = Vec::new();
        let mut i = 0;
        while i < hits.len() {
            if let Some(label) = hits[i] {
                let start = i;
                while i + 1 < hits.len() && hits[i + 1].is_some() {
                    i += 1;
                }
                // windows start..=i cover tokens start..i+n
                let span = toks[start..i + self.n].join(" ");
                spans.push((span, label.clone()));
            }
            i += 1;
        }
        spans
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_fold_case_and_strip_punctuation() {
        assert_eq!(
            audit_tokens("He said, \"NO!\"  -- then left."),
            vec!["he", "said", "no", "then", "left"]
        );
    }

    #[test]
    fn spans_are_maximal() {
        let mut idx = NgramIndex::new(3);
        idx.add("ch1", "one two three four five six");
        let spans = idx.matching_spans("zero one two three four nine");
        assert_eq!(spans, vec![("one two three four".into(), "ch1".into())]);
    }
}
