//! Small numerical helpers shared across modules: compensated summation,
//! pivoted solves and singular-value diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Solves `a x = b` with column-pivoted QR, rejecting numerically rank-deficient `a`.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = a.clone().col_piv_qr();
    check_rank(&qr.r(), a)?;
    qr.solve(b)
        .ok_or_else(|| Error::Singular(format!("{}x{} system has no unique solution", a.nrows(), a.ncols())))
}

pub fn solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    Ok(solve(a, &rhs)?.column(0).into_owned())
}

fn check_rank(r: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<()> {
    let k = r.nrows().min(r.ncols());
    if k == 0 || a.nrows() != a.ncols() {
        return Err(Error::Singular(format!("{}x{} matrix is not square", a.nrows(), a.ncols())));
    }
    let top = r[(0, 0)].abs();
    let tol = top * f64::EPSILON * (k as f64) * 4.0;
    if !top.is_finite() || top == 0.0 || (0..k).any(|i| r[(i, i)].abs() <= tol) {
        return Err(Error::Singular(format!("{}x{} matrix is rank deficient", a.nrows(), a.ncols())));
    }
    Ok(())
}

/// Singular values in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

/// Ratio of largest to smallest singular value; infinite when the smallest is zero.
pub fn condition_number(sv: &[f64]) -> f64 {
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => f64::NAN,
    }
}

/// Median of a slice (average of the two central values for even length).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut acc = CompensatedSum::new();
    for &v in values {
        acc.add(v);
    }
    acc.value() / values.len() as f64
}

/// Sample standard deviation with the `n - 1` denominator.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    let mut acc = CompensatedSum::new();
    for &v in values {
        acc.add((v - m) * (v - m));
    }
    (acc.value() / (n - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut acc = CompensatedSum::new();
        acc.add(1e16);
        for _ in 0..10 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.value(), 10.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn condition_number_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.5]));
        let sv = singular_values(&a);
        assert_eq!(sv, vec![4.0, 0.5]);
        assert!((condition_number(&sv) - 8.0).abs() < 1e-12);
        assert!(condition_number(&[1.0, 0.0]).is_infinite());
    }

    #[test]
    fn solve_rejects_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(solve_vec(&a, &b).is_err());
    }
}
