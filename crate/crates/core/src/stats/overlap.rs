use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::{Client, EmbeddingVector};

/// system → qid → ranked fact texts.
pub type SystemLogs = BTreeMap<String, BTreeMap<String, Vec<String>>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OverlapMode {
    Exact,
    Soft { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOverlap {
    pub system_a: String,
    pub system_b: String,
    pub qid: String,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMean {
    pub system_a: String,
    pub system_b: String,
    pub mean_jaccard: f64,
    pub n_questions: usize,
}

/// Pairwise overlap between systems. Pairs are stored once with
/// `system_a < system_b`; lookups are symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub mode: OverlapMode,
    pub k: usize,
    pub unique_dedup: bool,
    pub pairs: Vec<PairMean>,
    pub per_question: Vec<QuestionOverlap>,
    pub share_zero_rate: f64,
}

impl OverlapMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.pairs
            .iter()
            .find(|p| p.system_a == a && p.system_b == b)
            .map(|p| p.mean_jaccard)
    }

    pub fn overall_mean(&self) -> f64 {
        self.pairs.iter().map(|p| p.mean_jaccard).sum::<f64>() / self.pairs.len() as f64
    }
}

fn prepare(list: &[String], k: usize, unique: bool) -> Vec<String> {
    let top = list.iter().take(k);
    if unique {
        let mut seen = BTreeSet::new();
        top.filter(|t| seen.insert(t.as_str())).cloned().collect()
    } else {
        top.cloned().collect()
    }
}

fn ratio(matches: usize, a: usize, b: usize) -> f64 {
    let union = a + b - matches;
    if union == 0 {
        0.0
    } else {
        matches as f64 / union as f64
    }
}

/// Multiset intersection size (plain set size after dedup).
fn exact_matches(a: &[String], b: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in a {
        *counts.entry(t).or_default() += 1;
    }
    let mut m = 0;
    for t in b {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                m += 1;
            }
        }
    }
    m
}

/// Greedy one-to-one matching in descending cosine order; ties broken by
/// position so the result is deterministic.
fn soft_matches(a: &[&EmbeddingVector], b: &[&EmbeddingVector], threshold: f64) -> usize {
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for (i, va) in a.iter().enumerate() {
        for (j, vb) in b.iter().enumerate() {
            let c = va.cosine(vb);
            if c >= threshold - 1e-9 {
                edges.push((c, i, j));
            }
        }
    }
    edges.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut m = 0;
    for (_, i, j) in edges {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            m += 1;
        }
    }
    m
}

fn build<F>(logs: &SystemLogs, k: usize, unique: bool, mode: OverlapMode, mut matcher: F) -> Result<OverlapMatrix>
where
    F: FnMut(&[String], &[String]) -> usize,
{
    let systems: Vec<&String> = logs.keys().collect();
    let mut pairs = Vec::new();
    let mut per_question = Vec::new();
    let mut zero = 0usize;
    for (ia, a) in systems.iter().enumerate() {
        for b in &systems[ia + 1..] {
            let (la, lb) = (&logs[*a], &logs[*b]);
            let mut vals = Vec::new();
            for (qid, list_a) in la {
                let Some(list_b) = lb.get(qid) else { continue };
                let pa = prepare(list_a, k, unique);
                let pb = prepare(list_b, k, unique);
                let m = matcher(&pa, &pb);
                let j = ratio(m, pa.len(), pb.len());
                if m == 0 {
                    zero += 1;
                }
                vals.push(j);
                per_question.push(QuestionOverlap {
                    system_a: (*a).clone(),
                    system_b: (*b).clone(),
                    qid: qid.clone(),
                    jaccard: j,
                });
            }
            if !vals.is_empty() {
                pairs.push(PairMean {
                    system_a: (*a).clone(),
                    system_b: (*b).clone(),
                    mean_jaccard: vals.iter().sum::<f64>() / vals.len() as f64,
                    n_questions: vals.len(),
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoSharedQuestions);
    }
    Ok(OverlapMatrix {
        mode,
        k,
        unique_dedup: unique,
        share_zero_rate: zero as f64 / per_question.len() as f64,
        pairs,
        per_question,
    })
}

/// Exact-text Jaccard over the top-`k` facts of each pair of systems.
pub fn jaccard_overlap(logs: &SystemLogs, k: usize, unique_dedup: bool) -> Result<OverlapMatrix> {
    build(logs, k, unique_dedup, OverlapMode::Exact, exact_matches)
}

/// Jaccard where two facts match when their embedding cosine reaches
/// `threshold`; every distinct fact text is embedded once.
pub fn soft_jaccard(logs: &SystemLogs, embedder: &Client, threshold: f64, k: usize, unique_dedup: bool) -> Result<OverlapMatrix> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1]")));
    }
    let texts: Vec<String> = logs
        .values()
        .flat_map(|m| m.values())
        .flat_map(|l| prepare(l, k, unique_dedup))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let vectors = if texts.is_empty() { vec![] } else { embedder.embed(&texts, true)? };
    let table: HashMap<&str, &EmbeddingVector> = texts.iter().map(String::as_str).zip(&vectors).collect();
    build(logs, k, unique_dedup, OverlapMode::Soft { threshold }, |a, b| {
        let va: Vec<_> = a.iter().map(|t| table[t.as_str()]).collect();
        let vb: Vec<_> = b.iter().map(|t| table[t.as_str()]).collect();
        soft_matches(&va, &vb, threshold)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{ExactTextEmbedder, TableEmbedder};
    use std::sync::Arc;

    fn logs(entries: &[(&str, &str, &[&str])]) -> SystemLogs {
        let mut m = SystemLogs::new();
        for (sys, qid, facts) in entries {
            m.entry(sys.to_string())
                .or_default()
                .insert(qid.to_string(), facts.iter().map(|s| s.to_string()).collect());
        }
        m
    }

    #[test]
    fn identical_and_disjoint() {
        let l = logs(&[("a", "q1", &["x", "y"]), ("b", "q1", &["x", "y"]), ("a", "q2", &["x"]), ("b", "q2", &["z"])]);
        let m = jaccard_overlap(&l, 10, true).unwrap();
        let per: Vec<f64> = m.per_question.iter().map(|q| q.jaccard).collect();
        assert_eq!(per, vec![1.0, 0.0]);
        assert_eq!(m.share_zero_rate, 0.5);
        assert_eq!(m.get("b", "a"), m.get("a", "b"));
    }

    #[test]
    fn dedup_arithmetic() {
        let ten: Vec<&str> = ["f1", "f2", "f3", "f1", "f2", "f3", "f1", "f1", "f2", "f3"].to_vec();
        let l = logs(&[("a", "q", &ten), ("b", "q", &["f1", "g2", "g3"])]);
        assert!((jaccard_overlap(&l, 10, true).unwrap().pairs[0].mean_jaccard - 0.2).abs() < 1e-12);
        // without dedup: multiset, 1 / (10 + 3 − 1)
        assert!((jaccard_overlap(&l, 10, false).unwrap().pairs[0].mean_jaccard - 1.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn no_shared_questions() {
        let l = logs(&[("a", "q1", &["x"]), ("b", "q2", &["x"])]);
        assert!(matches!(jaccard_overlap(&l, 10, true), Err(Error::NoSharedQuestions)));
    }

    #[test]
    fn soft_at_one_equals_exact() {
        let l = logs(&[
            ("a", "q1", &["x", "y", "z"]),
            ("b", "q1", &["y", "w"]),
            ("c", "q1", &["x", "w", "v", "y"]),
        ]);
        let emb = Client::deterministic(Arc::new(ExactTextEmbedder::new("e"))).unwrap();
        let s = soft_jaccard(&l, &emb, 1.0, 10, true).unwrap();
        let e = jaccard_overlap(&l, 10, true).unwrap();
        for (p, q) in s.pairs.iter().zip(&e.pairs) {
            assert!((p.mean_jaccard - q.mean_jaccard).abs() < 1e-12);
        }
    }

    #[test]
    fn paraphrase_raises_soft_overlap() {
        let l = logs(&[("a", "q", &["he fled the city", "x"]), ("b", "q", &["he left town", "y"])]);
        let table: HashMap<String, Vec<f64>> = [
            ("he fled the city", vec![1.0, 0.1, 0.0, 0.0]),
            ("he left town", vec![0.95, 0.2, 0.0, 0.0]),
            ("x", vec![0.0, 0.0, 1.0, 0.0]),
            ("y", vec![0.0, 0.0, 0.0, 1.0]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let emb = Client::deterministic(Arc::new(TableEmbedder::new("t", table))).unwrap();
        let exact = jaccard_overlap(&l, 10, true).unwrap().pairs[0].mean_jaccard;
        let soft = soft_jaccard(&l, &emb, 0.9, 10, true).unwrap().pairs[0].mean_jaccard;
        assert_eq!(exact, 0.0);
        assert!((soft - 1.0 / 3.0).abs() < 1e-12);
    }
}
