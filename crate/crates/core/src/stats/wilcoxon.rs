use statrs::distribution::{ContinuousCDF, Normal};

use super::aggregate::DeltaSeries;
use super::correlation::midranks;
use super::TestResult;
use crate::error::{Error, Result};

/// Largest n for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 25;
const MIN_PAIRS: usize = 5;
const TIE_GRID: f64 = 1e9;

pub fn wilcoxon_signed_rank(series: &DeltaSeries) -> Result<TestResult> {
    wilcoxon_values(&series.values())
}

/// Two-sided signed-rank test. Zero differences are dropped; tied |d| get
/// mid-ranks; W = min(T+, T−).
pub fn wilcoxon_values(deltas: &[f64]) -> Result<TestResult> {
    let d: Vec<f64> = deltas
        .iter()
        .map(|x| (x * TIE_GRID).round() / TIE_GRID)
        .filter(|&x| x != 0.0)
        .collect();
    let n = d.len();
    if n < MIN_PAIRS {
        return Err(Error::TooFewPairs {
            needed: MIN_PAIRS,
            got: n,
        });
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = midranks(&abs);
    let t_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = t_plus.min(total - t_plus);
    let dropped = deltas.len() - n;

    let (p, method) = if n <= EXACT_MAX_N {
        (exact_p(&ranks, w), "exact")
    } else {
        let nf = n as f64;
        let ties: f64 = tie_groups(&abs).iter().map(|&t| (t * t * t - t) as f64).sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let z = (w - nf * (nf + 1.0) / 4.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * normal.cdf(z)).min(1.0), "normal approximation")
    };
    Ok(TestResult::new("W", w, n)
        .with_p(p)
        .with_method(format!("{method}; zeros dropped ({dropped}); ties mid-ranked"))
        .with_extra("t_plus", t_plus)
        .with_extra("t_minus", total - t_plus))
}

fn tie_groups(values: &[f64]) -> Vec<usize> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        if j > i {
            groups.push(j - i + 1);
        }
        i = j + 1;
    }
    groups
}

/// P(min(T+, T−) ≤ w) over all 2^n equally likely sign assignments,
/// counted by dynamic programming over doubled (integer) ranks.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2 = (w * 2.0).round() as usize;
    let hits: u64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s).min(total - s) <= w2)
        .map(|(_, c)| c)
        .sum();
    hits as f64 / 2f64.powi(doubled.len() as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enumerate(deltas: &[f64]) -> (f64, f64) {
        let d: Vec<f64> = deltas.iter().copied().filter(|&x| x != 0.0).collect();
        let ranks = midranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
        let total: f64 = ranks.iter().sum();
        let tp: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let w = tp.min(total - tp);
        let n = d.len();
        let mut hits = 0u64;
        for mask in 0u32..(1 << n) {
            let t: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if t.min(total - t) <= w + 1e-9 {
                hits += 1;
            }
        }
        (w, hits as f64 / (1u64 << n) as f64)
    }

    #[test]
    fn all_positive_six() {
        let r = wilcoxon_values(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.p_value, Some(0.03125));
    }

    #[test]
    fn too_few_after_dropping_zeros() {
        assert!(matches!(
            wilcoxon_values(&[0.0, 1.0, 2.0, -1.0, 0.0, 3.0]),
            Err(Error::TooFewPairs { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn tied_magnitudes_match_enumeration() {
        let d = [1.0, -1.0, 2.0, 2.0, -3.0, 1.0, 0.5, 2.0];
        let r = wilcoxon_values(&d).unwrap();
        let (w, p) = enumerate(&d);
        assert_eq!(r.value, w);
        assert!((r.p_value.unwrap() - p).abs() < 1e-15);
    }

    #[test]
    fn large_n_uses_normal() {
        let d: Vec<f64> = (1..=40).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 }).collect();
        let r = wilcoxon_values(&d).unwrap();
        assert!(r.method.starts_with("normal"));
        // T− = 3 + 6 + … + 39 = 273; mean 410, var 40·41·81/24
        assert_eq!(r.value, 273.0);
        let z: f64 = (273.0 - 410.0) / 5535.0f64.sqrt();
        let p = 2.0 * (1.0 - 0.5 * (1.0 + statrs::function::erf::erf(z.abs() / 2f64.sqrt())));
        assert!((r.p_value.unwrap() - p).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn exact_equals_enumeration(v in proptest::collection::vec(-4i32..=4, 5..=12)) {
            let d: Vec<f64> = v.iter().map(|&x| f64::from(x) * 0.25).collect();
            proptest::prop_assume!(d.iter().filter(|&&x| x != 0.0).count() >= 5);
            let r = wilcoxon_values(&d).unwrap();
            let (w, p) = enumerate(&d);
            proptest::prop_assert_eq!(r.value, w);
            proptest::prop_assert_eq!(r.p_value.unwrap(), p);
        }
    }
}
