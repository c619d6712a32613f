//! Nadaraya-Watson regression with a product Gaussian smoothing kernel.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    /// `h_s = sd(x_s) * n^(-1/5)` per dimension.
    RuleOfThumb,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NwFit {
    pub bandwidths: Vec<f64>,
    /// Leave-one-out fitted values at the training points.
    pub fitted: DVector<f64>,
    pub warnings: Vec<String>,
    train_x: DMatrix<f64>,
    train_y: DVector<f64>,
}

fn sample_sd(col: &[f64]) -> f64 {
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Per-dimension bandwidths for `x` under `rule`.
pub fn bandwidths(x: &DMatrix<f64>, rule: &BandwidthRule) -> Result<Vec<f64>> {
    let (n, q) = x.shape();
    let h: Vec<f64> = match rule {
        BandwidthRule::RuleOfThumb => {
            let factor = (n as f64).powf(-0.2);
            (0..q).map(|s| sample_sd(x.column(s).as_slice()) * factor).collect()
        }
        BandwidthRule::Fixed(h) => {
            if h.len() != q {
                return Err(Error::Config(format!("{} bandwidths given for {q} covariates", h.len())));
            }
            h.clone()
        }
    };
    if let Some(s) = h.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::ZeroBandwidth(s));
    }
    Ok(h)
}

#[inline]
fn weight(a: &[f64], b: &[f64], h: &[f64]) -> f64 {
    let mut d = 0.0;
    for s in 0..h.len() {
        let r = (a[s] - b[s]) / h[s];
        d += r * r;
    }
    (-0.5 * d).exp()
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

pub fn nw_fit(x: &DMatrix<f64>, target: &[f64], rule: &BandwidthRule) -> Result<NwFit> {
    let n = x.nrows();
    if target.len() != n {
        return Err(Error::Data("target length does not match covariates".into()));
    }
    if let Some(i) = target.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("regression target has a non-finite value at row {i}")));
    }
    let h = bandwidths(x, rule)?;
    let mut warnings = Vec::new();
    if x.ncols() > 3 {
        warnings.push(format!("kernel regression on {} covariates; fewer than four is recommended", x.ncols()));
    }
    let r = rows(x);
    let global = target.iter().sum::<f64>() / n as f64;
    let mut fallbacks = 0usize;
    let fitted = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..n {
                if j != i {
                    let w = weight(&r[i], &r[j], &h);
                    num += w * target[j];
                    den += w;
                }
            }
            if den > 0.0 {
                num / den
            } else {
                fallbacks += 1;
                global
            }
        }),
    );
    if fallbacks > 0 {
        warnings.push(format!("{fallbacks} rows had no effective neighbours; used the global mean"));
    }
    Ok(NwFit { bandwidths: h, fitted, warnings, train_x: x.clone(), train_y: DVector::from_column_slice(target) })
}

impl NwFit {
    /// Full-sample weighted averages at new points.
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let tr = rows(&self.train_x);
        let global = self.train_y.mean();
        DVector::from_iterator(
            x.nrows(),
            rows(x).iter().map(|a| {
                let mut num = 0.0;
                let mut den = 0.0;
                for (b, &y) in tr.iter().zip(self.train_y.iter()) {
                    let w = weight(a, b, &self.bandwidths);
                    num += w * y;
                    den += w;
                }
                if den > 0.0 {
                    num / den
                } else {
                    global
                }
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_of_thumb_factor() {
        let n = 3000;
        let x = DMatrix::from_fn(n, 1, |i, _| ((i * 37) % 101) as f64);
        let h = bandwidths(&x, &BandwidthRule::RuleOfThumb).unwrap();
        let sd = sample_sd(x.column(0).as_slice());
        assert!((h[0] / sd - 0.2017).abs() < 1e-3);
    }

    #[test]
    fn constant_target_is_reproduced() {
        let x = DMatrix::from_fn(30, 2, |i, j| (i as f64 * 0.3 + j as f64).sin());
        let fit = nw_fit(&x, &[2.5; 30], &BandwidthRule::RuleOfThumb).unwrap();
        assert!(fit.fitted.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn hand_instance_matches_formula() {
        let xs = [0.0, 0.5, 1.0, 2.0, 3.5];
        let ys = [1.0, 2.0, 0.0, 4.0, 3.0];
        let h = 0.8;
        let fit = nw_fit(&DMatrix::from_column_slice(5, 1, &xs), &ys, &BandwidthRule::Fixed(vec![h])).unwrap();
        for i in 0..5 {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..5 {
                if i != j {
                    let w = (-0.5 * ((xs[i] - xs[j]) / h).powi(2)).exp();
                    num += w * ys[j];
                    den += w;
                }
            }
            assert!((fit.fitted[i] - num / den).abs() < 1e-14);
        }
        let at = fit.predict(&DMatrix::from_column_slice(1, 1, &[0.5]));
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..5 {
            let w = (-0.5 * ((0.5 - xs[j]) / h).powi(2)).exp();
            num += w * ys[j];
            den += w;
        }
        assert!((at[0] - num / den).abs() < 1e-14);
    }

    #[test]
    fn zero_bandwidth_and_underflow() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]);
        assert!(matches!(nw_fit(&x, &[1.0, 2.0, 3.0], &BandwidthRule::RuleOfThumb), Err(Error::ZeroBandwidth(0))));
        let far = DMatrix::from_column_slice(3, 1, &[0.0, 1e6, 2e6]);
        let fit = nw_fit(&far, &[1.0, 2.0, 3.0], &BandwidthRule::Fixed(vec![1.0])).unwrap();
        assert!(fit.fitted.iter().all(|v| (v - 2.0).abs() < 1e-12));
        assert!(!fit.warnings.is_empty());
    }
}
