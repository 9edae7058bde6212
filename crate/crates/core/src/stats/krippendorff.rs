use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TestResult;
use crate::error::{Error, Result};

/// judges × items; `None` marks an absent rating.
pub type RatingMatrix = Vec<Vec<Option<u8>>>;

/// How expected disagreement treats values that have no partner.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaConvention {
    /// Marginals come from pairable values only (items with ≥ 2 ratings).
    #[default]
    PairableValues,
    /// Marginals come from every observed value, including lone ratings.
    RawPairs,
}

/// Ordinal-metric Krippendorff α by pair counting over value frequencies.
pub fn krippendorff_alpha_ordinal(matrix: &[Vec<Option<u8>>], convention: AlphaConvention) -> Result<TestResult> {
    let n_items = matrix.iter().map(Vec::len).max().unwrap_or(0);
    let mut item_counts: Vec<BTreeMap<u8, f64>> = vec![BTreeMap::new(); n_items];
    for row in matrix {
        for (i, v) in row.iter().enumerate() {
            if let Some(v) = v {
                *item_counts[i].entry(*v).or_default() += 1.0;
            }
        }
    }
    let pairable: Vec<&BTreeMap<u8, f64>> = item_counts
        .iter()
        .filter(|c| c.values().sum::<f64>() >= 2.0)
        .collect();
    if pairable.is_empty() {
        return Err(Error::NothingPairable);
    }

    let mut marginal: BTreeMap<u8, f64> = BTreeMap::new();
    let source: Vec<&BTreeMap<u8, f64>> = match convention {
        AlphaConvention::PairableValues => pairable.clone(),
        AlphaConvention::RawPairs => item_counts.iter().collect(),
    };
    for c in source {
        for (&v, &k) in c {
            *marginal.entry(v).or_default() += k;
        }
    }
    let values: Vec<u8> = marginal.keys().copied().collect();
    let freq: Vec<f64> = values.iter().map(|v| marginal[v]).collect();
    let n: f64 = freq.iter().sum();
    let pos = |v: u8| values.binary_search(&v).expect("value in marginal");
    // ordinal distance: (sum of frequencies from c to k, minus half the ends)^2
    let delta = |a: usize, b: usize| -> f64 {
        let (lo, hi) = (a.min(b), a.max(b));
        let s: f64 = freq[lo..=hi].iter().sum();
        (s - (freq[lo] + freq[hi]) / 2.0).powi(2)
    };

    let mut observed = 0.0;
    let mut n_pairable = 0.0;
    for c in &pairable {
        let m: f64 = c.values().sum();
        n_pairable += m;
        for (&a, &ka) in c.iter() {
            for (&b, &kb) in c.iter() {
                if a != b {
                    observed += ka * kb * delta(pos(a), pos(b)) / (m - 1.0);
                }
            }
        }
    }
    let mut expected = 0.0;
    for i in 0..values.len() {
        for j in 0..values.len() {
            expected += freq[i] * freq[j] * delta(i, j);
        }
    }
    let alpha = if expected == 0.0 {
        if observed == 0.0 { 1.0 } else { f64::NEG_INFINITY }
    } else {
        1.0 - (n - 1.0) * observed / expected * (n / n_pairable)
    };
    let method = match convention {
        AlphaConvention::PairableValues => "ordinal; pairable-values marginals",
        AlphaConvention::RawPairs => "ordinal; raw-value marginals",
    };
    Ok(TestResult::new("alpha", alpha, pairable.len())
        .with_method(method)
        .with_extra("pairable_values", n_pairable))
}
