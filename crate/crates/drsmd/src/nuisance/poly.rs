//! Per-covariate polynomial expansion without cross terms.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Columns `X_q, X_q^2, ..., X_q^d` for each covariate `q`, covariate-major.
pub fn poly_features(x: &DMatrix<f64>, max_degree: usize) -> Result<DMatrix<f64>> {
    if max_degree == 0 {
        return Err(Error::Config("polynomial degree must be at least 1".into()));
    }
    let (n, q) = x.shape();
    let mut out = DMatrix::zeros(n, q * max_degree);
    for c in 0..q {
        for i in 0..n {
            let v = x[(i, c)];
            let mut pow = 1.0;
            for d in 0..max_degree {
                pow *= v;
                if !pow.is_finite() {
                    return Err(Error::Overflow(format!("covariate {c} (degree {})", d + 1)));
                }
                out[(i, c * max_degree + d)] = pow;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powers_of_two() {
        let f = poly_features(&DMatrix::from_row_slice(1, 1, &[2.0]), 3).unwrap();
        assert_eq!(f.as_slice(), &[2.0, 4.0, 8.0]);
    }

    #[test]
    fn degree_one_is_identity() {
        let x = DMatrix::from_row_slice(2, 2, &[1.5, -2.0, 0.25, 3.0]);
        assert_eq!(poly_features(&x, 1).unwrap(), x);
    }

    #[test]
    fn mixed_signs_and_layout() {
        let f = poly_features(&DMatrix::from_row_slice(2, 1, &[-1.0, 0.5]), 2).unwrap();
        assert_eq!(f, DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.5, 0.25]));
        let g = poly_features(&DMatrix::from_row_slice(1, 2, &[2.0, 3.0]), 2).unwrap();
        assert_eq!(g.as_slice(), &[2.0, 4.0, 3.0, 9.0]);
    }

    #[test]
    fn overflow_names_column() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 1e200]);
        match poly_features(&x, 2) {
            Err(Error::Overflow(msg)) => assert!(msg.contains("covariate 1")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
