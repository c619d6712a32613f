//! L1-penalized least squares by covariance-update coordinate descent, with
//! K-fold cross-validation over a log-spaced penalty grid.
//!
//! Objective: `(1/2n) ||y - b0 - F b||^2 + lambda ||b||_1` on standardized
//! features (population standard deviation) with an unpenalized intercept.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Convergence threshold on the largest coefficient change in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_sweeps: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub intercept: f64,
    /// Coefficients on the original feature scale; zero for dropped columns.
    pub coef: Vec<f64>,
    pub lambda: f64,
    /// Penalty grid, descending (empty for fixed-penalty fits).
    pub lambdas: Vec<f64>,
    /// Mean cross-validated squared error per grid point.
    pub cv_errors: Vec<f64>,
    pub selected: Option<usize>,
    pub support: usize,
    pub dropped: Vec<usize>,
    pub warnings: Vec<String>,
}

impl LassoFit {
    pub fn predict(&self, features: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::from_element(features.nrows(), self.intercept);
        for (k, &b) in self.coef.iter().enumerate() {
            if b != 0.0 {
                out.axpy(b, &features.column(k), 1.0);
            }
        }
        out
    }
}

struct Standardization {
    keep: Vec<usize>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

fn standardization(features: &DMatrix<f64>, rows: &[usize]) -> Standardization {
    let nr = rows.len() as f64;
    let mut keep = Vec::new();
    let mut mean = Vec::new();
    let mut sd = Vec::new();
    for c in 0..features.ncols() {
        let col = features.column(c);
        let m = rows.iter().map(|&i| col[i]).sum::<f64>() / nr;
        let v = rows.iter().map(|&i| (col[i] - m) * (col[i] - m)).sum::<f64>() / nr;
        let first = col[rows[0]];
        if v > 0.0 && rows.iter().any(|&i| col[i] != first) {
            keep.push(c);
            mean.push(m);
            sd.push(v.sqrt());
        }
    }
    Standardization { keep, mean, sd }
}

fn standardized_block(features: &DMatrix<f64>, rows: &[usize], st: &Standardization) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), st.keep.len());
    for (k, &c) in st.keep.iter().enumerate() {
        let col = features.column(c);
        let (m, s) = (st.mean[k], st.sd[k]);
        for (r, &i) in rows.iter().enumerate() {
            out[(r, k)] = (col[i] - m) / s;
        }
    }
    out
}

/// Sufficient statistics of a standardized problem.
struct Problem {
    gram: DMatrix<f64>,
    corr: Vec<f64>,
    ybar: f64,
}

fn problem(fs: &DMatrix<f64>, target: &[f64], rows: &[usize]) -> Problem {
    let nr = rows.len() as f64;
    let ybar = rows.iter().map(|&i| target[i]).sum::<f64>() / nr;
    let yc = DVector::from_iterator(rows.len(), rows.iter().map(|&i| target[i] - ybar));
    let gram = fs.tr_mul(fs) / nr;
    let corr = (fs.tr_mul(&yc) / nr).iter().copied().collect();
    Problem { gram, corr, ybar }
}

#[inline]
fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Coordinate descent at one penalty, warm-started from `beta` with matching `grad`
/// (`grad = corr - gram * beta`).
fn descend(pb: &Problem, lambda: f64, beta: &mut [f64], grad: &mut [f64], opts: &LassoOptions) -> bool {
    let k = beta.len();
    for _ in 0..opts.max_sweeps {
        let mut max_change: f64 = 0.0;
        for j in 0..k {
            let gjj = pb.gram[(j, j)];
            let z = grad[j] + gjj * beta[j];
            let new = soft_threshold(z, lambda) / gjj;
            let d = new - beta[j];
            if d != 0.0 {
                beta[j] = new;
                let col = pb.gram.column(j);
                for (g, &c) in grad.iter_mut().zip(col.iter()) {
                    *g -= c * d;
                }
                max_change = max_change.max(d.abs());
            }
        }
        if max_change < opts.tol {
            return true;
        }
    }
    false
}

fn to_original(st: &Standardization, ybar: f64, beta: &[f64], m: usize) -> (f64, Vec<f64>) {
    let mut coef = vec![0.0; m];
    let mut intercept = ybar;
    for (k, &c) in st.keep.iter().enumerate() {
        let b = beta[k] / st.sd[k];
        coef[c] = b;
        intercept -= b * st.mean[k];
    }
    (intercept, coef)
}

fn check_target(target: &[f64]) -> Result<()> {
    if let Some(i) = target.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("lasso target has a non-finite value at row {i}")));
    }
    Ok(())
}

fn dropped(st: &Standardization, m: usize) -> Vec<usize> {
    (0..m).filter(|c| !st.keep.contains(c)).collect()
}

/// Fit at a fixed penalty on the full sample.
pub fn lasso_fit(features: &DMatrix<f64>, target: &[f64], lambda: f64, opts: &LassoOptions) -> Result<LassoFit> {
    check_target(target)?;
    let n = features.nrows();
    let m = features.ncols();
    let rows: Vec<usize> = (0..n).collect();
    let st = standardization(features, &rows);
    let fs = standardized_block(features, &rows, &st);
    let pb = problem(&fs, target, &rows);
    let mut beta = vec![0.0; st.keep.len()];
    let mut grad = pb.corr.clone();
    let mut warnings = Vec::new();
    if !descend(&pb, lambda, &mut beta, &mut grad, opts) {
        warnings.push(format!("coordinate descent hit {} sweeps at lambda {lambda:.3e}", opts.max_sweeps));
    }
    let (intercept, coef) = to_original(&st, pb.ybar, &beta, m);
    Ok(LassoFit {
        intercept,
        support: coef.iter().filter(|b| **b != 0.0).count(),
        coef,
        lambda,
        lambdas: Vec::new(),
        cv_errors: Vec::new(),
        selected: None,
        dropped: dropped(&st, m),
        warnings,
    })
}

/// Descending log-spaced grid from `lambda_max` to `ratio * lambda_max`.
pub fn lambda_grid(lambda_max: f64, size: usize, ratio: f64) -> Vec<f64> {
    if size == 1 {
        return vec![lambda_max];
    }
    (0..size)
        .map(|i| lambda_max * ratio.powf(i as f64 / (size - 1) as f64))
        .collect()
}

/// Fold label per row from a seeded shuffle.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        out[i] = pos % folds;
    }
    out
}

/// Cross-validated fit: the penalty minimizing mean K-fold squared error, ties toward larger penalties.
pub fn lasso_cv_fit(
    features: &DMatrix<f64>,
    target: &[f64],
    folds: usize,
    grid_size: usize,
    seed: u64,
    opts: &LassoOptions,
) -> Result<LassoFit> {
    check_target(target)?;
    let n = features.nrows();
    let m = features.ncols();
    if folds < 2 || n < folds {
        return Err(Error::Config(format!("need 2 <= folds <= n (folds = {folds}, n = {n})")));
    }
    if grid_size == 0 {
        return Err(Error::Config("lambda grid must be non-empty".into()));
    }
    let rows: Vec<usize> = (0..n).collect();
    let st = standardization(features, &rows);
    let fs = standardized_block(features, &rows, &st);
    let full = problem(&fs, target, &rows);
    let lambda_max = full.corr.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let mut warnings = Vec::new();
    if st.keep.is_empty() || lambda_max == 0.0 {
        if st.keep.is_empty() && m > 0 {
            warnings.push("all features are constant; fitting intercept only".into());
        }
        return Ok(LassoFit {
            intercept: full.ybar,
            coef: vec![0.0; m],
            lambda: 0.0,
            lambdas: Vec::new(),
            cv_errors: Vec::new(),
            selected: None,
            support: 0,
            dropped: dropped(&st, m),
            warnings,
        });
    }
    let lambdas = lambda_grid(lambda_max, grid_size, 1e-4);
    let labels = fold_assignment(n, folds, seed);

    let mut cv_sum = vec![0.0; lambdas.len()];
    for f in 0..folds {
        let train: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] != f).collect();
        let test: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == f).collect();
        let tst = standardization(features, &train);
        let ftr = standardized_block(features, &train, &tst);
        let pb = problem(&ftr, target, &train);
        let fte = standardized_block(features, &test, &tst);
        let yte = DVector::from_iterator(test.len(), test.iter().map(|&i| target[i] - pb.ybar));
        let mut beta = vec![0.0; tst.keep.len()];
        let mut grad = pb.corr.clone();
        for (li, &lambda) in lambdas.iter().enumerate() {
            if !tst.keep.is_empty() && !descend(&pb, lambda, &mut beta, &mut grad, opts) {
                warnings.push(format!("fold {f}: coordinate descent hit the sweep limit at lambda {lambda:.3e}"));
            }
            let err = if tst.keep.is_empty() {
                yte.norm_squared()
            } else {
                (&yte - &fte * DVector::from_column_slice(&beta)).norm_squared()
            };
            cv_sum[li] += err / test.len() as f64;
        }
    }
    let cv_errors: Vec<f64> = cv_sum.iter().map(|s| s / folds as f64).collect();
    let mut selected = 0;
    for (i, &e) in cv_errors.iter().enumerate() {
        if e < cv_errors[selected] {
            selected = i;
        }
    }

    let mut beta = vec![0.0; st.keep.len()];
    let mut grad = full.corr.clone();
    for &lambda in &lambdas[..=selected] {
        if !descend(&full, lambda, &mut beta, &mut grad, opts) {
            warnings.push(format!("coordinate descent hit the sweep limit at lambda {lambda:.3e}"));
        }
    }
    let (intercept, coef) = to_original(&st, full.ybar, &beta, m);
    if st.keep.len() != m {
        warnings.push(format!("{} constant feature columns dropped", m - st.keep.len()));
    }
    Ok(LassoFit {
        intercept,
        support: coef.iter().filter(|b| **b != 0.0).count(),
        coef,
        lambda: lambdas[selected],
        lambdas,
        cv_errors,
        selected: Some(selected),
        dropped: dropped(&st, m),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_design(n: usize, m: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n)
            .map(|i| 1.0 + (0..m).map(|k| f[(i, k)] * (k as f64 - 4.0) * 0.5).sum::<f64>() + rng.sample::<f64, _>(StandardNormal))
            .collect();
        (f, y)
    }

    fn objective(x: &[f64], y: &[f64], b0: f64, b: f64, lambda: f64) -> f64 {
        let n = x.len() as f64;
        x.iter().zip(y).map(|(xi, yi)| (yi - b0 - b * xi).powi(2)).sum::<f64>() / (2.0 * n) + lambda * b.abs()
    }

    #[test]
    fn soft_threshold_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..6 {
            let n = 50;
            let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let m = raw.iter().sum::<f64>() / n as f64;
            let sd = (raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            let x: Vec<f64> = raw.iter().map(|v| (v - m) / sd).collect();
            let slope = [0.8, -0.3, 0.05, 1.5, -2.0, 0.0][case];
            let y: Vec<f64> = x.iter().map(|xi| 0.7 + slope * xi + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
            let ybar = y.iter().sum::<f64>() / n as f64;
            let ols = x.iter().zip(&y).map(|(a, b)| a * (b - ybar)).sum::<f64>() / n as f64;
            let lambda = 0.2;
            let closed = ols.signum() * (ols.abs() - lambda).max(0.0);
            let fit = lasso_fit(&DMatrix::from_column_slice(n, 1, &x), &y, lambda, &LassoOptions::default()).unwrap();
            assert!((fit.coef[0] - closed).abs() < 1e-8);
            // Golden-section search of the univariate objective as an independent check.
            let (mut lo, mut hi) = (-5.0f64, 5.0f64);
            let g = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let a = hi - g * (hi - lo);
                let b = lo + g * (hi - lo);
                if objective(&x, &y, ybar, a, lambda) < objective(&x, &y, ybar, b, lambda) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            assert!((0.5 * (lo + hi) - closed).abs() < 1e-8);
        }
    }

    #[test]
    fn vanishing_penalty_is_least_squares() {
        let (f, y) = random_design(200, 10, 11);
        let fit = lasso_fit(&f, &y, 0.0, &LassoOptions { tol: 1e-12, max_sweeps: 100_000 }).unwrap();
        let mut design = DMatrix::from_element(200, 11, 1.0);
        design.view_mut((0, 1), (200, 10)).copy_from(&f);
        let yv = DVector::from_column_slice(&y);
        let ols = (design.transpose() * &design).lu().solve(&(design.transpose() * yv)).unwrap();
        assert!((fit.intercept - ols[0]).abs() < 1e-5);
        for k in 0..10 {
            assert!((fit.coef[k] - ols[k + 1]).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_target_gives_zero_fit() {
        let (f, _) = random_design(60, 4, 2);
        let fit = lasso_cv_fit(&f, &vec![0.0; 60], 5, 100, 1, &LassoOptions::default()).unwrap();
        assert_eq!(fit.intercept, 0.0);
        assert!(fit.coef.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn constant_features_fit_intercept_only() {
        let f = DMatrix::from_element(20, 2, 3.0);
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let fit = lasso_cv_fit(&f, &y, 5, 10, 1, &LassoOptions::default()).unwrap();
        assert!((fit.intercept - 9.5).abs() < 1e-12);
        assert_eq!(fit.dropped, vec![0, 1]);
        assert!(!fit.warnings.is_empty());
    }

    #[test]
    fn selected_lambda_minimizes_cv_error() {
        let (f, y) = random_design(150, 8, 5);
        let fit = lasso_cv_fit(&f, &y, 5, 100, 9, &LassoOptions::default()).unwrap();
        let sel = fit.selected.unwrap();
        assert_eq!(fit.lambdas.len(), 100);
        assert!((fit.lambdas[99] / fit.lambdas[0] - 1e-4).abs() < 1e-12);
        for (i, e) in fit.cv_errors.iter().enumerate() {
            assert!(fit.cv_errors[sel] <= *e);
            if i < sel {
                assert!(fit.cv_errors[sel] < *e);
            }
        }
        assert!(fit.support > 0);
    }

    #[test]
    fn largest_lambda_zeroes_everything() {
        let (f, y) = random_design(80, 5, 8);
        let fit = lasso_cv_fit(&f, &y, 4, 20, 1, &LassoOptions::default()).unwrap();
        let top = lasso_fit(&f, &y, fit.lambdas[0], &LassoOptions::default()).unwrap();
        assert!(top.coef.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let a = fold_assignment(103, 5, 4);
        assert_eq!(a, fold_assignment(103, 5, 4));
        for f in 0..5 {
            let c = a.iter().filter(|&&x| x == f).count();
            assert!(c == 20 || c == 21);
        }
    }
}
