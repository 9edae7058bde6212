use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::regression::ols_slope;
use super::{mean, quantile_sorted, sample_sd, TestResult};
use crate::error::{Error, Result};

/// Iterations per RNG stream. Chunk `c` draws from stream `c` of the seed,
/// so results do not depend on how chunks are scheduled.
pub const RESAMPLE_CHUNK: usize = 1000;
const MIN_ITERATIONS: usize = 1000;

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

fn run_chunks<F>(iterations: usize, seed: u64, per_chunk: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng, usize) -> Vec<f64> + Sync,
{
    let n_chunks = iterations.div_ceil(RESAMPLE_CHUNK);
    let job = |c: usize| {
        let len = RESAMPLE_CHUNK.min(iterations - c * RESAMPLE_CHUNK);
        per_chunk(&mut chunk_rng(seed, c), len)
    };
    #[cfg(feature = "parallel")]
    let chunks: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(job).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let chunks: Vec<Vec<f64>> = (0..n_chunks).map(job).collect();
    chunks.into_iter().flatten().collect()
}

fn check(x: &[f64], y: &[f64], iterations: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::TooFewPairs { needed: 3, got: x.len() });
    }
    if iterations < MIN_ITERATIONS {
        return Err(Error::invalid(format!("need at least {MIN_ITERATIONS} iterations, got {iterations}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Observed slope with the percentile 95% CI.
    pub test: TestResult,
    pub fraction_negative: f64,
    /// Resamples whose x had no spread; they carry no slope and are skipped.
    pub n_degenerate: usize,
    #[serde(skip)]
    pub slopes: Vec<f64>,
}

impl BootstrapResult {
    pub fn fraction_below(&self, threshold: f64) -> f64 {
        self.slopes.iter().filter(|&&s| s < threshold).count() as f64 / self.slopes.len() as f64
    }
}

/// Resample (x, y) pairs with replacement and refit the slope.
pub fn bootstrap_slope(x: &[f64], y: &[f64], iterations: usize, seed: u64) -> Result<BootstrapResult> {
    check(x, y, iterations)?;
    let observed = ols_slope(x, y).ok_or(Error::DegenerateX)?;
    let n = x.len();
    let raw = run_chunks(iterations, seed, |rng, len| {
        let mut bx = vec![0.0; n];
        let mut by = vec![0.0; n];
        (0..len)
            .map(|_| {
                for k in 0..n {
                    let i = rng.gen_range(0..n);
                    bx[k] = x[i];
                    by[k] = y[i];
                }
                ols_slope(&bx, &by).unwrap_or(f64::NAN)
            })
            .collect()
    });
    let slopes: Vec<f64> = raw.iter().copied().filter(|s| !s.is_nan()).collect();
    let n_degenerate = raw.len() - slopes.len();
    let mut sorted = slopes.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, 0.025);
    let hi = quantile_sorted(&sorted, 0.975);
    let fraction_negative = slopes.iter().filter(|&&s| s < 0.0).count() as f64 / slopes.len() as f64;
    let mut test = TestResult::new("slope", observed, n)
        .with_ci(lo, hi)
        .with_method("percentile bootstrap over subjects")
        .with_extra("iterations", iterations as f64);
    test.seed = Some(seed);
    Ok(BootstrapResult {
        test,
        fraction_negative,
        n_degenerate,
        slopes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationScheme {
    /// Permute Δ against the fixed baseline.
    ShuffleDelta,
    /// Permute the treated levels, then recompute Δ.
    ShuffleLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub scheme: PermutationScheme,
    /// Observed slope of Δ on baseline with the empirical two-sided p.
    pub test: TestResult,
    pub null_mean: f64,
    pub null_sd: f64,
    #[serde(skip)]
    pub null: Vec<f64>,
}

/// Null distribution of the slope of Δ = level − baseline on baseline.
pub fn permutation_slope(
    baseline: &[f64],
    level: &[f64],
    iterations: usize,
    seed: u64,
    scheme: PermutationScheme,
) -> Result<PermutationResult> {
    check(baseline, level, iterations)?;
    let delta: Vec<f64> = level.iter().zip(baseline).map(|(l, b)| l - b).collect();
    let observed = ols_slope(baseline, &delta).ok_or(Error::DegenerateX)?;
    let null = run_chunks(iterations, seed, |rng, len| {
        let mut perm = match scheme {
            PermutationScheme::ShuffleDelta => delta.clone(),
            PermutationScheme::ShuffleLevel => level.to_vec(),
        };
        let mut d = vec![0.0; perm.len()];
        (0..len)
            .map(|_| {
                perm.shuffle(rng);
                match scheme {
                    PermutationScheme::ShuffleDelta => d.copy_from_slice(&perm),
                    PermutationScheme::ShuffleLevel => {
                        for (k, v) in d.iter_mut().enumerate() {
                            *v = perm[k] - baseline[k];
                        }
                    }
                }
                ols_slope(baseline, &d).expect("baseline spread checked above")
            })
            .collect()
    });
    let tol = 1e-12;
    let extreme = null.iter().filter(|s| s.abs() >= observed.abs() - tol).count();
    let p = extreme as f64 / null.len() as f64;
    let mut test = TestResult::new("slope", observed, baseline.len())
        .with_p(p)
        .with_method(match scheme {
            PermutationScheme::ShuffleDelta => "permutation; shuffle_delta; two-sided |null| >= |observed|",
            PermutationScheme::ShuffleLevel => "permutation; shuffle_level; two-sided |null| >= |observed|",
        })
        .with_extra("iterations", iterations as f64)
        .with_extra("extreme_count", extreme as f64);
    test.seed = Some(seed);
    Ok(PermutationResult {
        scheme,
        test,
        null_mean: mean(&null),
        null_sd: sample_sd(&null),
        null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const X: [f64; 6] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5];

    #[test]
    fn perfect_line_has_zero_width_ci() {
        let y: Vec<f64> = X.iter().map(|v| 1.0 - 0.5 * v).collect();
        let b = bootstrap_slope(&X, &y, 2000, 3).unwrap();
        let (lo, hi) = b.test.ci.unwrap();
        assert!((hi - lo).abs() < 1e-9);
        assert!((lo + 0.5).abs() < 1e-9);
        assert_eq!(b.fraction_negative, 1.0);
    }

    #[test]
    fn same_seed_same_ci() {
        let y = [2.0, 1.7, 2.4, 1.1, 1.9, 0.5];
        let a = bootstrap_slope(&X, &y, 3000, 11).unwrap();
        let b = bootstrap_slope(&X, &y, 3000, 11).unwrap();
        assert_eq!(a.test.ci, b.test.ci);
        assert_eq!(a.slopes, b.slopes);
        let c = bootstrap_slope(&X, &y, 3000, 12).unwrap();
        assert_ne!(a.slopes, c.slopes);
    }

    #[test]
    fn too_few_iterations() {
        assert!(bootstrap_slope(&X, &X, 999, 0).is_err());
    }

    #[test]
    fn constant_delta_has_p_one() {
        let level: Vec<f64> = X.iter().map(|v| v + 0.7).collect();
        let r = permutation_slope(&X, &level, 1000, 5, PermutationScheme::ShuffleDelta).unwrap();
        assert_eq!(r.test.p_value, Some(1.0));
        assert!(r.null.iter().all(|s| (s - r.test.value).abs() < 1e-12));
    }

    #[test]
    fn permutation_is_reproducible() {
        let level = [2.0, 2.9, 2.4, 3.1, 3.0, 3.8];
        for scheme in [PermutationScheme::ShuffleDelta, PermutationScheme::ShuffleLevel] {
            let a = permutation_slope(&X, &level, 2500, 9, scheme).unwrap();
            let b = permutation_slope(&X, &level, 2500, 9, scheme).unwrap();
            assert_eq!(a.null, b.null);
        }
    }
}
