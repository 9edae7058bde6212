use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::battery::Battery;
use crate::error::{Error, Result};
use crate::judging::ScoreCube;
use crate::runner::ConditionId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelChoice {
    #[default]
    Primary,
    Sensitivity,
    Both,
}

#[derive(Debug, Clone, Default)]
pub struct AggregateOptions {
    pub panel: PanelChoice,
    /// (subject_id, qid) pairs to keep; `None` keeps everything in the cube.
    pub include: Option<BTreeSet<(String, String)>>,
}

/// Behavioral-prediction questions of each battery, for `AggregateOptions::include`.
pub fn behavioral_filter<'a>(batteries: impl IntoIterator<Item = &'a Battery>) -> BTreeSet<(String, String)> {
    batteries
        .into_iter()
        .flat_map(|b| b.behavioral().map(move |q| (b.subject_id().to_string(), q.qid.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectConditionMean {
    pub subject_id: String,
    pub condition: ConditionId,
    pub per_judge_means: BTreeMap<String, f64>,
    pub panel_mean: f64,
    pub n_questions: usize,
    pub effective_panel: usize,
}

fn panel_judges(cube: &ScoreCube, choice: PanelChoice) -> Vec<&String> {
    match choice {
        PanelChoice::Primary => cube.panel.primary.iter().collect(),
        PanelChoice::Sensitivity => cube.panel.sensitivity.iter().collect(),
        PanelChoice::Both => cube.panel.all_judges().collect(),
    }
}

fn kept(opts: &AggregateOptions, subject: &str, qid: &str) -> bool {
    opts.include
        .as_ref()
        .map_or(true, |s| s.contains(&(subject.to_string(), qid.to_string())))
}

/// Judge-first aggregation: each judge's mean over its scored questions,
/// then the unweighted mean of those judge means.
pub fn aggregate(cube: &ScoreCube, opts: &AggregateOptions) -> Result<Vec<SubjectConditionMean>> {
    let judges = panel_judges(cube, opts.panel);
    if judges.is_empty() {
        return Err(Error::invalid("selected panel is empty"));
    }
    let mut out = Vec::new();
    for (subject, by_cond) in &cube.scores {
        for (&condition, by_qid) in by_cond {
            let mut sums: BTreeMap<&String, (f64, usize)> = BTreeMap::new();
            let mut questions = BTreeSet::new();
            for (qid, by_judge) in by_qid {
                if !kept(opts, subject, qid) {
                    continue;
                }
                for j in &judges {
                    if let Some(&s) = by_judge.get(*j) {
                        let e = sums.entry(*j).or_insert((0.0, 0));
                        e.0 += f64::from(s);
                        e.1 += 1;
                        questions.insert(qid);
                    }
                }
            }
            if sums.is_empty() {
                return Err(Error::EmptyCell {
                    subject: subject.clone(),
                    condition: condition.to_string(),
                });
            }
            let per_judge_means: BTreeMap<String, f64> =
                sums.into_iter().map(|(j, (s, n))| (j.clone(), s / n as f64)).collect();
            let panel_mean = per_judge_means.values().sum::<f64>() / per_judge_means.len() as f64;
            out.push(SubjectConditionMean {
                subject_id: subject.clone(),
                condition,
                effective_panel: per_judge_means.len(),
                per_judge_means,
                panel_mean,
                n_questions: questions.len(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSeries {
    pub condition_a: ConditionId,
    pub condition_b: ConditionId,
    pub pairs: Vec<(String, f64)>,
    /// Subjects missing either condition.
    pub omitted: Vec<String>,
}

impl DeltaSeries {
    pub fn values(&self) -> Vec<f64> {
        self.pairs.iter().map(|(_, d)| *d).collect()
    }
}

/// mean(cond_a) − mean(cond_b) per subject, in subject order.
pub fn delta(means: &[SubjectConditionMean], cond_a: ConditionId, cond_b: ConditionId) -> DeltaSeries {
    let mut by_subject: BTreeMap<&str, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for m in means {
        let e = by_subject.entry(&m.subject_id).or_default();
        if m.condition == cond_a {
            e.0 = Some(m.panel_mean);
        }
        if m.condition == cond_b {
            e.1 = Some(m.panel_mean);
        }
    }
    let mut pairs = Vec::new();
    let mut omitted = Vec::new();
    for (s, v) in by_subject {
        match v {
            (Some(a), Some(b)) => pairs.push((s.to_string(), a - b)),
            _ => omitted.push(s.to_string()),
        }
    }
    DeltaSeries {
        condition_a: cond_a,
        condition_b: cond_b,
        pairs,
        omitted,
    }
}

/// Panel mean per question (mean over the judges present on it).
pub fn per_question_means(
    cube: &ScoreCube,
    subject_id: &str,
    condition: ConditionId,
    panel: PanelChoice,
) -> BTreeMap<String, f64> {
    let judges = panel_judges(cube, panel);
    let Some(cell) = cube.cell(subject_id, condition) else { return BTreeMap::new() };
    cell.iter()
        .filter_map(|(qid, by_judge)| {
            let s: Vec<f64> = judges.iter().filter_map(|j| by_judge.get(*j)).map(|&v| f64::from(v)).collect();
            (!s.is_empty()).then(|| (qid.clone(), super::mean(&s)))
        })
        .collect()
}

/// (before, after) per-question panel means for questions scored in both.
pub fn paired_question_means(
    cube: &ScoreCube,
    subject_id: &str,
    before: ConditionId,
    after: ConditionId,
    panel: PanelChoice,
) -> Vec<(String, f64, f64)> {
    let a = per_question_means(cube, subject_id, before, panel);
    let b = per_question_means(cube, subject_id, after, panel);
    a.into_iter()
        .filter_map(|(q, x)| b.get(&q).map(|&y| (q, x, y)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judging::PanelDef;

    fn c(s: &str) -> ConditionId {
        s.parse().unwrap()
    }

    #[test]
    fn single_and_double_judge_means() {
        let mut cube = ScoreCube::new(PanelDef::primary(&["a"]));
        for (q, s) in [("q1", 1), ("q2", 2), ("q3", 3)] {
            cube.insert("s", c("C5"), q, "a", s);
        }
        let m = aggregate(&cube, &AggregateOptions::default()).unwrap();
        assert_eq!(m[0].panel_mean, 2.0);

        let mut cube = ScoreCube::new(PanelDef::primary(&["a", "b"]));
        for q in ["q1", "q2"] {
            cube.insert("s", c("C5"), q, "a", 2);
            cube.insert("s", c("C5"), q, "b", 3);
        }
        assert_eq!(aggregate(&cube, &AggregateOptions::default()).unwrap()[0].panel_mean, 2.5);
    }

    #[test]
    fn judge_first_differs_from_pooled() {
        // judge a covers one question, judge b covers three
        let mut cube = ScoreCube::new(PanelDef::primary(&["a", "b"]));
        cube.insert("s", c("C4a"), "q1", "a", 5);
        for q in ["q1", "q2", "q3"] {
            cube.insert("s", c("C4a"), q, "b", 1);
        }
        let m = &aggregate(&cube, &AggregateOptions::default()).unwrap()[0];
        let pooled = (5.0 + 1.0 + 1.0 + 1.0) / 4.0;
        assert_eq!(m.panel_mean, 3.0);
        assert_ne!(m.panel_mean, pooled);
        assert_eq!(m.effective_panel, 2);
        assert_eq!(m.n_questions, 3);
    }

    #[test]
    fn absent_judges_are_not_imputed() {
        let mut cube = ScoreCube::new(PanelDef::primary(&["a", "b"]));
        cube.insert("s", c("C5"), "q1", "a", 4);
        cube.record_absence("s", c("C5"), "q1", "b", "judge call failed");
        let m = &aggregate(&cube, &AggregateOptions::default()).unwrap()[0];
        assert_eq!(m.panel_mean, 4.0);
        assert_eq!(m.effective_panel, 1);
    }

    #[test]
    fn empty_cell_errors() {
        let mut cube = ScoreCube::new(PanelDef::primary(&["a"]));
        cube.insert("s", c("C5"), "q1", "other", 4);
        assert!(matches!(aggregate(&cube, &AggregateOptions::default()), Err(Error::EmptyCell { .. })));
    }

    #[test]
    fn delta_omits_incomplete_subjects() {
        let mk = |s: &str, cond: &str, v: f64| SubjectConditionMean {
            subject_id: s.into(),
            condition: c(cond),
            per_judge_means: BTreeMap::new(),
            panel_mean: v,
            n_questions: 1,
            effective_panel: 1,
        };
        let means = vec![mk("ebers", "C5", 1.02), mk("ebers", "C4a", 2.07), mk("x", "C5", 2.0)];
        let d = delta(&means, c("C4a"), c("C5"));
        assert_eq!(d.pairs.len(), 1);
        assert!((d.pairs[0].1 - 1.05).abs() < 1e-12);
        assert_eq!(d.omitted, vec!["x"]);
        assert!(delta(&means, c("C5"), c("C5")).values().iter().all(|&v| v == 0.0));
    }
}
