//! Deterministic analytics: locked aggregation, paired tests, agreement,
//! regressions with resampling, anchor crossings, retrieval overlap and
//! response-text audits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

mod aggregate;
mod audit;
mod correlation;
mod krippendorff;
mod overlap;
mod regression;
mod resample;
mod transitions;
mod wilcoxon;

pub use aggregate::{
    aggregate, behavioral_filter, delta, paired_question_means, per_question_means, AggregateOptions, DeltaSeries,
    PanelChoice, SubjectConditionMean,
};
pub use audit::{classify_refusal, length_score_correlation, refusal_rate, LengthScore, RefusalMode, RefusalPatterns};
pub use correlation::{midranks, pearson, spearman_rho};
pub use krippendorff::{krippendorff_alpha_ordinal, AlphaConvention, RatingMatrix};
pub use overlap::{jaccard_overlap, soft_jaccard, OverlapMatrix, OverlapMode, PairMean, QuestionOverlap, SystemLogs};
pub use regression::{linear_regression, multiple_regression, ols_slope, Coefficient, LinearFit, MultipleFit};
pub use resample::{
    bootstrap_slope, permutation_slope, BootstrapResult, PermutationResult, PermutationScheme, RESAMPLE_CHUNK,
};
pub use transitions::{anchor_transitions, band, improvement_rates, ImprovementRates, TransitionTable};
pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_values, EXACT_MAX_N};

/// Common result shape for every test and estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic_name: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<(f64, f64)>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// How the number was produced (exact vs approximate, conventions).
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub method: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, f64>,
}

impl TestResult {
    pub fn new(statistic_name: &str, value: f64, n: usize) -> Self {
        Self {
            statistic_name: statistic_name.into(),
            value,
            p_value: None,
            ci: None,
            n,
            seed: None,
            method: String::new(),
            extras: BTreeMap::new(),
        }
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p_value = Some(p.clamp(0.0, 1.0));
        self
    }

    pub fn with_ci(mut self, lo: f64, hi: f64) -> Self {
        self.ci = Some((lo.min(hi), lo.max(hi)));
        self
    }

    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }

    pub fn with_extra(mut self, key: &str, v: f64) -> Self {
        self.extras.insert(key.into(), v);
        self
    }

    pub fn extra(&self, key: &str) -> Option<f64> {
        self.extras.get(key).copied()
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1).
pub(crate) fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

pub(crate) fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Linear-interpolation quantile of sorted data (the common "type 7").
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
