use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::correlation::{correlation_p, pearson};
use super::TestResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefusalMode {
    /// A marker opens the response.
    Strict,
    /// A marker appears anywhere.
    #[default]
    Broad,
}

/// Versioned list of refusal markers, matched case-insensitively.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefusalPatterns {
    pub version: String,
    #[serde(default)]
    pub note: String,
    pub patterns: Vec<String>,
}

impl Default for RefusalPatterns {
    fn default() -> Self {
        Self::from_json(include_str!("../../data/refusal_patterns.json")).expect("shipped refusal patterns parse")
    }
}

impl RefusalPatterns {
    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        if p.patterns.iter().any(|x| x.trim().is_empty()) {
            return Err(Error::invalid("empty refusal pattern"));
        }
        Ok(p)
    }
}

fn fold(s: &str) -> String {
    s.replace(['\u{2019}', '\u{2018}'], "'").to_lowercase()
}

pub fn classify_refusal(response: &str, mode: RefusalMode, patterns: &RefusalPatterns) -> bool {
    let text = fold(response);
    let text = text.trim_start();
    patterns.patterns.iter().map(|p| fold(p)).any(|p| match mode {
        RefusalMode::Broad => text.contains(&p),
        RefusalMode::Strict => text.starts_with(&p),
    })
}

pub fn refusal_rate<'a>(responses: impl IntoIterator<Item = &'a str>, mode: RefusalMode, patterns: &RefusalPatterns) -> f64 {
    let (mut hits, mut n) = (0usize, 0usize);
    for r in responses {
        n += 1;
        if classify_refusal(r, mode, patterns) {
            hits += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthScore {
    pub group: String,
    pub response_chars: usize,
    pub panel_mean: f64,
}

/// Pearson r of response length against panel mean within each group.
pub fn length_score_correlation(items: &[LengthScore]) -> Result<BTreeMap<String, TestResult>> {
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for it in items {
        let g = groups.entry(&it.group).or_default();
        g.0.push(it.response_chars as f64);
        g.1.push(it.panel_mean);
    }
    groups
        .into_iter()
        .map(|(g, (x, y))| {
            if x.len() < 3 {
                return Err(Error::GroupTooSmall {
                    group: g.into(),
                    size: x.len(),
                });
            }
            let r = pearson(&x, &y)?;
            let mut t = TestResult::new("r", r, x.len()).with_method("Pearson; chars vs panel mean");
            t.p_value = correlation_p(r, x.len());
            Ok((g.to_string(), t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refusal_modes() {
        let p = RefusalPatterns::default();
        let documented = "I don't have specific documented instances of this.";
        assert!(classify_refusal(documented, RefusalMode::Broad, &p));
        assert!(classify_refusal(documented, RefusalMode::Strict, &p));
        let substantive = "He would refuse the assistance and pay his own way.";
        assert!(!classify_refusal(substantive, RefusalMode::Broad, &p));
        assert!(!classify_refusal(substantive, RefusalMode::Strict, &p));
        let mid = "He probably left, though I cannot confirm the date.";
        assert!(classify_refusal(mid, RefusalMode::Broad, &p));
        assert!(!classify_refusal(mid, RefusalMode::Strict, &p));
        assert!(classify_refusal("  I DON\u{2019}T HAVE SPECIFIC INFORMATION here", RefusalMode::Strict, &p));
    }

    #[test]
    fn affine_length_gives_r_one() {
        let items: Vec<LengthScore> = (0..6)
            .map(|i| LengthScore {
                group: "C4a".into(),
                response_chars: 100 + 50 * i,
                panel_mean: 1.0 + 0.5 * i as f64,
            })
            .collect();
        let r = &length_score_correlation(&items).unwrap()["C4a"];
        assert!((r.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn textbook_formula() {
        let len = [120.0, 340.0, 90.0, 410.0, 260.0];
        let score = [1.8, 3.2, 1.2, 2.6, 3.0];
        let items: Vec<LengthScore> = len
            .iter()
            .zip(&score)
            .map(|(&l, &s)| LengthScore {
                group: "g".into(),
                response_chars: l as usize,
                panel_mean: s,
            })
            .collect();
        let n = 5.0;
        let sx: f64 = len.iter().sum();
        let sy: f64 = score.iter().sum();
        let sxy: f64 = len.iter().zip(&score).map(|(a, b)| a * b).sum();
        let sxx: f64 = len.iter().map(|a| a * a).sum();
        let syy: f64 = score.iter().map(|b| b * b).sum();
        let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        assert!((length_score_correlation(&items).unwrap()["g"].value - r).abs() < 1e-12);
    }

    #[test]
    fn small_group() {
        let items = vec![LengthScore {
            group: "C5".into(),
            response_chars: 3,
            panel_mean: 1.0,
        }];
        assert!(matches!(length_score_correlation(&items), Err(Error::GroupTooSmall { size: 1, .. })));
    }
}
