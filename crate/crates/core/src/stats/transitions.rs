use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::median;
use crate::error::{Error, Result};

const EPS: f64 = 1e-9;

/// Integer rubric band of a panel mean: floor, with 5.0 in band 5.
pub fn band(x: f64) -> Result<u8> {
    if !(1.0 - EPS..=5.0 + EPS).contains(&x) {
        return Err(Error::OutOfRangeScore(x));
    }
    Ok(((x + EPS).floor() as u8).clamp(1, 5))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionTable {
    /// from band → to band → count, over every pair.
    pub counts: BTreeMap<u8, BTreeMap<u8, usize>>,
    pub upward: usize,
    /// Upward by two or more bands (a subset of `upward`).
    pub multi_anchor: usize,
    pub downward: usize,
    pub no_crossing: usize,
    pub total: usize,
}

impl TransitionTable {
    pub fn count(&self, from: u8, to: u8) -> usize {
        self.counts.get(&from).and_then(|m| m.get(&to)).copied().unwrap_or(0)
    }

    pub fn upward_rate(&self) -> f64 {
        self.upward as f64 / self.total as f64
    }
}

pub fn anchor_transitions(pairs: &[(f64, f64)]) -> Result<TransitionTable> {
    let mut t = TransitionTable::default();
    for &(before, after) in pairs {
        let (a, b) = (band(before)?, band(after)?);
        *t.counts.entry(a).or_default().entry(b).or_default() += 1;
        t.total += 1;
        if b > a {
            t.upward += 1;
            if b - a >= 2 {
                t.multi_anchor += 1;
            }
        } else if b < a {
            t.downward += 1;
        } else {
            t.no_crossing += 1;
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRates {
    pub improved: usize,
    pub tied: usize,
    pub worse: usize,
    pub improvement_rate: f64,
    pub median_delta_improved: Option<f64>,
    pub median_delta_worsened: Option<f64>,
}

/// Strict per-question comparison of (before, after) panel means. With
/// `round_to`, both means are rounded to that many decimals first.
pub fn improvement_rates(pairs: &[(f64, f64)], round_to: Option<i32>) -> Result<ImprovementRates> {
    if pairs.is_empty() {
        return Err(Error::invalid("no paired means"));
    }
    let r = |v: f64| match round_to {
        Some(d) => {
            let s = 10f64.powi(d);
            (v * s).round() / s
        }
        None => v,
    };
    let mut up = Vec::new();
    let mut down = Vec::new();
    let mut tied = 0;
    for &(b, a) in pairs {
        let (b, a) = (r(b), r(a));
        if a > b {
            up.push(a - b);
        } else if a < b {
            down.push(a - b);
        } else {
            tied += 1;
        }
    }
    Ok(ImprovementRates {
        improved: up.len(),
        tied,
        worse: down.len(),
        improvement_rate: up.len() as f64 / pairs.len() as f64,
        median_delta_improved: median(&up),
        median_delta_worsened: median(&down),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands() {
        assert_eq!(band(1.0).unwrap(), 1);
        assert_eq!(band(1.99).unwrap(), 1);
        assert_eq!(band(2.0).unwrap(), 2);
        assert_eq!(band(4.999).unwrap(), 4);
        assert_eq!(band(5.0).unwrap(), 5);
        assert!(matches!(band(0.5), Err(Error::OutOfRangeScore(_))));
        assert!(band(5.2).is_err());
    }

    #[test]
    fn worked_crossings() {
        let t = anchor_transitions(&[(1.4, 2.3), (2.1, 2.9), (1.2, 3.4), (3.0, 2.8)]).unwrap();
        assert_eq!(t.count(1, 2), 1);
        assert_eq!((t.upward, t.multi_anchor, t.downward, t.no_crossing), (2, 1, 1, 1));
    }

    #[test]
    fn rates_249_49_53() {
        let mut pairs = vec![(1.0, 2.0); 249];
        pairs.extend(vec![(2.0, 2.0); 49]);
        pairs.extend(vec![(3.0, 2.0); 53]);
        let r = improvement_rates(&pairs, None).unwrap();
        assert_eq!((r.improved, r.tied, r.worse), (249, 49, 53));
        assert!((r.improvement_rate - 0.709).abs() < 5e-4);
    }

    #[test]
    fn rounding_flag_changes_ties() {
        let p = [(2.001, 2.004)];
        assert_eq!(improvement_rates(&p, None).unwrap().improved, 1);
        assert_eq!(improvement_rates(&p, Some(2)).unwrap().tied, 1);
    }

    #[test]
    fn medians_match_sorting() {
        let p = [(1.0, 2.0), (1.0, 1.5), (2.0, 4.6), (3.0, 1.0), (2.0, 1.8)];
        let r = improvement_rates(&p, None).unwrap();
        assert_eq!(r.median_delta_improved, Some(1.0));
        assert!((r.median_delta_worsened.unwrap() - (-1.1)).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn counts_partition_pairs(v in proptest::collection::vec((1.0f64..=5.0, 1.0f64..=5.0), 0..200)) {
            let t = anchor_transitions(&v).unwrap();
            let cells: usize = t.counts.values().flat_map(|m| m.values()).sum();
            proptest::prop_assert_eq!(cells, v.len());
            proptest::prop_assert_eq!(t.upward + t.downward + t.no_crossing, v.len());
        }
    }
}
