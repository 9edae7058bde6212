use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::TestResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_se: f64,
    pub slope_ci: (f64, f64),
    pub p_value: f64,
    pub n: usize,
}

/// Least-squares slope alone, `None` when x has no spread. Used in the
/// resampling hot loops.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    (sxx > 0.0).then(|| sxy / sxx)
}

fn t_two_sided(t: f64, df: f64) -> (f64, f64) {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    (p, dist.inverse_cdf(0.975))
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFewPairs { needed: 3, got: n });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateX);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let df = nf - 2.0;
    let slope_se = (sse / df / sxx).sqrt();
    let (p_value, tcrit) = if slope_se == 0.0 {
        (if slope == 0.0 { 1.0 } else { 0.0 }, 0.0)
    } else {
        t_two_sided(slope / slope_se, df)
    };
    Ok(LinearFit {
        slope,
        intercept,
        r2,
        slope_se,
        slope_ci: (slope - tcrit * slope_se, slope + tcrit * slope_se),
        p_value,
        n,
    })
}

/// OLS of y on x with a t-based 95% slope CI and two-sided p.
pub fn linear_regression(x: &[f64], y: &[f64]) -> Result<TestResult> {
    let f = linear_fit(x, y)?;
    Ok(TestResult::new("slope", f.slope, f.n)
        .with_p(f.p_value)
        .with_ci(f.slope_ci.0, f.slope_ci.1)
        .with_method("OLS; t-based 95% CI")
        .with_extra("intercept", f.intercept)
        .with_extra("r2", f.r2)
        .with_extra("slope_se", f.slope_se))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p_value: f64,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipleFit {
    /// Intercept first, then one per predictor in input order.
    pub coefficients: Vec<Coefficient>,
    pub r2: f64,
    pub adj_r2: f64,
    /// One per predictor.
    pub vifs: Vec<f64>,
    pub n: usize,
}

impl MultipleFit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

fn design(columns: &[&[f64]], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, columns.len() + 1, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] })
}

fn r_squared(y: &[f64], fitted: &DVector<f64>) -> f64 {
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sse: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    if sst == 0.0 { 1.0 } else { 1.0 - sse / sst }
}

fn solve(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let xtx = x.transpose() * x;
    let svd = xtx.clone().svd(false, false);
    let (max, min) = svd
        .singular_values
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    if min <= max * 1e-12 {
        return Err(Error::Collinear);
    }
    let inv = xtx.try_inverse().ok_or(Error::Collinear)?;
    let beta = &inv * x.transpose() * y;
    Ok((beta, inv))
}

/// OLS of y on named predictor columns with an intercept.
pub fn multiple_regression(y: &[f64], predictors: &[(&str, &[f64])]) -> Result<MultipleFit> {
    let n = y.len();
    for (_, col) in predictors {
        if col.len() != n {
            return Err(Error::LengthMismatch(n, col.len()));
        }
    }
    let p = predictors.len();
    if n <= p + 1 {
        return Err(Error::TooFewPairs { needed: p + 2, got: n });
    }
    let cols: Vec<&[f64]> = predictors.iter().map(|(_, c)| *c).collect();
    let x = design(&cols, n);
    let yv = DVector::from_column_slice(y);
    let (beta, inv) = solve(&x, &yv)?;
    let fitted = &x * &beta;
    let sse: f64 = yv.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let df = (n - p - 1) as f64;
    let sigma2 = sse / df;
    let r2 = r_squared(y, &fitted);
    let adj_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / df;

    let names = std::iter::once("intercept").chain(predictors.iter().map(|(n, _)| *n));
    let coefficients = names
        .enumerate()
        .map(|(j, name)| {
            let se = (sigma2 * inv[(j, j)]).sqrt();
            let t = beta[j] / se;
            let (p_value, tcrit) = t_two_sided(t, df);
            Coefficient {
                name: name.into(),
                estimate: beta[j],
                se,
                t,
                p_value,
                ci: (beta[j] - tcrit * se, beta[j] + tcrit * se),
            }
        })
        .collect();

    let vifs = (0..p)
        .map(|j| {
            if p == 1 {
                return Ok(1.0);
            }
            let others: Vec<&[f64]> = (0..p).filter(|&k| k != j).map(|k| cols[k]).collect();
            let xo = design(&others, n);
            let target = DVector::from_column_slice(cols[j]);
            let (b, _) = solve(&xo, &target)?;
            let r2j = r_squared(cols[j], &(&xo * b));
            Ok(1.0 / (1.0 - r2j))
        })
        .collect::<Result<Vec<f64>>>()?;

    Ok(MultipleFit {
        coefficients,
        r2,
        adj_r2,
        vifs,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let r = linear_regression(&x, &y).unwrap();
        assert!((r.value - 2.0).abs() < 1e-12);
        assert!((r.extra("r2").unwrap() - 1.0).abs() < 1e-12);
        assert!((r.extra("intercept").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_x() {
        assert!(matches!(linear_regression(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]), Err(Error::DegenerateX)));
    }

    #[test]
    fn constant_predictor_is_collinear() {
        let y = [1.0, 2.0, 3.0, 5.0, 4.0];
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0; 5];
        assert!(matches!(multiple_regression(&y, &[("a", &a), ("b", &b)]), Err(Error::Collinear)));
    }

    #[test]
    fn orthogonal_predictors_give_univariate_slopes() {
        // centered, mutually orthogonal columns
        let a = [-1.0, -1.0, 1.0, 1.0, -1.0, 1.0];
        let b = [-1.0, 1.0, -1.0, 1.0, 0.0, 0.0];
        let y = [0.3, 1.9, 2.2, 4.1, 0.8, 3.0];
        let fit = multiple_regression(&y, &[("a", &a), ("b", &b)]).unwrap();
        let sa = ols_slope(&a, &y).unwrap();
        let sb = ols_slope(&b, &y).unwrap();
        assert!((fit.coefficient("a").unwrap().estimate - sa).abs() < 1e-12);
        assert!((fit.coefficient("b").unwrap().estimate - sb).abs() < 1e-12);
        for v in &fit.vifs {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_slope_identity() {
        let x = [1.02, 1.03, 1.26, 1.67, 1.70, 1.76, 1.77];
        let level = [2.07, 2.41, 2.77, 2.78, 2.48, 2.01, 2.59];
        let d: Vec<f64> = level.iter().zip(&x).map(|(l, b)| l - b).collect();
        let sl = ols_slope(&x, &level).unwrap();
        let sd = ols_slope(&x, &d).unwrap();
        assert!((sd - (sl - 1.0)).abs() < 1e-12);
    }
}
