//! Kernel-weighted closed-form estimators.
//!
//! With `a_l = sum_{j != l} kappa_{j,l} (P~_j - r_l)`, the orthogonal estimator
//! solves `(sum_l a_l P~_l') theta = sum_l a_l y~_l`; setting the correction
//! `r` to zero gives the plain residualized version, and skipping the
//! residualization gives the raw one. The correction enters the point
//! estimate indexed by the residual observation `l`, but enters the variance
//! indexed by the outer observation `j`, whose inner sum runs over all `l`
//! including `l = j`.

use nalgebra::{DMatrix, DVector};

use super::{EstimateResult, EstimatorTag};
use crate::error::{Error, Result};
use crate::kernel::{pair_sums, KernelMatrix, PairSums};
use crate::numeric::{condition_number, singular_values, solve, solve_vec, CompensatedSum};
use crate::nuisance::{NuisanceFits, OrthogonalCorrection};

/// Condition number above which estimation is refused.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmdOptions {
    pub max_condition: f64,
}

impl Default for SmdOptions {
    fn default() -> Self {
        Self { max_condition: MAX_CONDITION }
    }
}

fn check_shapes(fits: &NuisanceFits, ratio: &DMatrix<f64>, k: &KernelMatrix) -> Result<()> {
    let n = fits.n();
    if k.n() != n || ratio.shape() != fits.residual_p.shape() {
        return Err(Error::Data("fits, correction and kernel disagree on dimensions".into()));
    }
    if n < fits.p() + 1 {
        return Err(Error::InsufficientData { n, required: fits.p() + 1 });
    }
    Ok(())
}

/// Rows `a_l = u_l - r_l s_l`.
fn corrected_sums(sums: &PairSums, ratio: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = sums.u.clone();
    for l in 0..a.nrows() {
        for c in 0..a.ncols() {
            a[(l, c)] -= ratio[(l, c)] * sums.s[l];
        }
    }
    a
}

/// `M = sum_l a_l P~_l'` and `b = sum_l a_l y~_l`.
fn normal_equations(a: &DMatrix<f64>, fits: &NuisanceFits) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p) = a.shape();
    let mut m = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for r in 0..p {
        let mut acc_b = CompensatedSum::new();
        let mut acc_m = vec![CompensatedSum::new(); p];
        for l in 0..n {
            let al = a[(l, r)];
            acc_b.add(al * fits.residual_y[l]);
            for c in 0..p {
                acc_m[c].add(al * fits.residual_p[(l, c)]);
            }
        }
        b[r] = acc_b.value();
        for c in 0..p {
            m[(r, c)] = acc_m[c].value();
        }
    }
    (m, b)
}

/// Unnormalized identifying matrix `M` for a given correction ratio.
pub fn identifying_matrix(fits: &NuisanceFits, ratio: &DMatrix<f64>, k: &KernelMatrix) -> Result<DMatrix<f64>> {
    check_shapes(fits, ratio, k)?;
    let sums = pair_sums(k, &fits.residual_p);
    Ok(normal_equations(&corrected_sums(&sums, ratio), fits).0)
}

fn variance_from_sums(
    fits: &NuisanceFits,
    ratio: &DMatrix<f64>,
    sums: &PairSums,
    m: &DMatrix<f64>,
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (n, p) = fits.residual_p.shape();
    let mut omega = vec![CompensatedSum::new(); p * p];
    let mut v = vec![0.0; p];
    for j in 0..n {
        let pj = fits.residual_p.row(j);
        let eps = fits.residual_y[j] - (pj * theta)[(0, 0)];
        let e2 = eps * eps;
        for c in 0..p {
            v[c] = sums.u[(j, c)] + pj[c] - ratio[(j, c)] * (sums.s[j] + 1.0);
        }
        for r in 0..p {
            for c in 0..p {
                omega[r * p + c].add(v[r] * v[c] * e2);
            }
        }
    }
    let omega = DMatrix::from_fn(p, p, |r, c| omega[r * p + c].value());
    let left = solve(m, &omega)?;
    let v = solve(m, &left.transpose())?.transpose();
    Ok((&v + v.transpose()) * 0.5)
}

/// Shared computation behind the raw, residualized and orthogonal estimators.
pub fn smd_type_estimate(
    tag: EstimatorTag,
    fits: &NuisanceFits,
    ratio: &DMatrix<f64>,
    k: &KernelMatrix,
    opts: &SmdOptions,
) -> Result<EstimateResult> {
    check_shapes(fits, ratio, k)?;
    let n = fits.n();
    let sums = pair_sums(k, &fits.residual_p);
    let a = corrected_sums(&sums, ratio);
    let (m, b) = normal_equations(&a, fits);
    let scale = 1.0 / (n as f64 * (n as f64 - 1.0));
    let c_n = &m * scale;
    let cond = condition_number(&singular_values(&c_n));
    if !(cond <= opts.max_condition) {
        return Err(Error::Identification { condition_number: cond, threshold: opts.max_condition });
    }
    let theta = solve_vec(&m, &b)?;
    let vcov = variance_from_sums(fits, ratio, &sums, &m, &theta)?;
    Ok(EstimateResult::assemble(tag, theta, vcov, c_n, n))
}

/// Orthogonal (debiased) estimator.
pub fn drsmd_estimate(fits: &NuisanceFits, corr: &OrthogonalCorrection, k: &KernelMatrix) -> Result<EstimateResult> {
    let mut out = smd_type_estimate(EstimatorTag::Drsmd, fits, &corr.ratio, k, &SmdOptions::default())?;
    out.warnings.extend(fits.warnings.iter().cloned());
    out.warnings.extend(corr.warnings.iter().cloned());
    Ok(out)
}

/// Residualized estimator without the orthogonal correction.
pub fn rsmd_estimate(fits: &NuisanceFits, k: &KernelMatrix) -> Result<EstimateResult> {
    let zero = DMatrix::zeros(fits.n(), fits.p());
    let mut out = smd_type_estimate(EstimatorTag::Rsmd, fits, &zero, k, &SmdOptions::default())?;
    out.warnings.extend(fits.warnings.iter().cloned());
    Ok(out)
}

/// Estimator on the untransformed outcome and treatment block.
pub fn smd_estimate(y: &DVector<f64>, p: &DMatrix<f64>, k: &KernelMatrix) -> Result<EstimateResult> {
    let fits = NuisanceFits::untransformed(y, p);
    let zero = DMatrix::zeros(fits.n(), fits.p());
    smd_type_estimate(EstimatorTag::Smd, &fits, &zero, k, &SmdOptions::default())
}

/// Sandwich covariance of the orthogonal estimate at `theta`.
pub fn drsmd_variance(
    fits: &NuisanceFits,
    corr: &OrthogonalCorrection,
    k: &KernelMatrix,
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_shapes(fits, &corr.ratio, k)?;
    let sums = pair_sums(k, &fits.residual_p);
    let a = corrected_sums(&sums, &corr.ratio);
    let (m, _) = normal_equations(&a, fits);
    variance_from_sums(fits, &corr.ratio, &sums, &m, theta)
}

/// Sample moment `(1/(n(n-1))) sum_j sum_{l != j} kappa_{j,l} (P~_j - r_l)(y~_l - P~_l' theta)`.
pub fn orthogonal_moment(
    fits: &NuisanceFits,
    ratio: &DMatrix<f64>,
    k: &KernelMatrix,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_shapes(fits, ratio, k)?;
    let sums = pair_sums(k, &fits.residual_p);
    Ok(moment_from_sums(fits, ratio, &sums, theta))
}

/// [`orthogonal_moment`] from precomputed pair sums of `fits.residual_p`, for repeated
/// evaluation under changes to the outcome fit or the correction ratio.
pub fn moment_from_sums(fits: &NuisanceFits, ratio: &DMatrix<f64>, sums: &PairSums, theta: &DVector<f64>) -> DVector<f64> {
    let (n, p) = fits.residual_p.shape();
    assert_eq!(sums.u.shape(), (n, p), "moment_from_sums: pair sums do not match the fits");
    let a = corrected_sums(sums, ratio);
    let resid = &fits.residual_y - &fits.residual_p * theta;
    let scale = 1.0 / (n as f64 * (n as f64 - 1.0));
    DVector::from_iterator(
        p,
        (0..p).map(|c| {
            let mut acc = CompensatedSum::new();
            for l in 0..n {
                acc.add(a[(l, c)] * resid[l]);
            }
            acc.value() * scale
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{kernel_matrix, KernelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    struct Instance {
        z: DMatrix<f64>,
        fits: NuisanceFits,
        corr: OrthogonalCorrection,
        k: KernelMatrix,
    }

    fn instance(n: usize, p: usize, seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || rng.sample::<f64, _>(StandardNormal);
        let z = DMatrix::from_fn(n, 1, |_, _| g());
        let pt = DMatrix::from_fn(n, p, |i, c| z[(i, 0)] * (c as f64 + 1.0) + g());
        let y = DVector::from_fn(n, |i, _| pt.row(i).sum() + g());
        let fits = NuisanceFits::from_fitted(&y, &pt, DVector::zeros(n), DMatrix::zeros(n, p)).unwrap();
        let gp = DMatrix::from_fn(n, p, |_, _| 0.3 * g());
        let gk = DVector::from_fn(n, |_, _| 0.5 + 0.1 * g().abs());
        let corr = OrthogonalCorrection::from_fitted(gp, gk).unwrap();
        let k = kernel_matrix(&z, &KernelSpec::unit(true)).unwrap();
        Instance { z, fits, corr, k }
    }

    /// Literal double loop over `j` and `l != j`.
    fn naive_theta(inst: &Instance, ratio: &DMatrix<f64>) -> DVector<f64> {
        let (n, p) = inst.fits.residual_p.shape();
        let mut m = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        for j in 0..n {
            for l in 0..n {
                if l == j {
                    continue;
                }
                let w = inst.k.get(j, l);
                for r in 0..p {
                    let left = inst.fits.residual_p[(j, r)] - ratio[(l, r)];
                    b[r] += w * left * inst.fits.residual_y[l];
                    for c in 0..p {
                        m[(r, c)] += w * left * inst.fits.residual_p[(l, c)];
                    }
                }
            }
        }
        m.lu().solve(&b).unwrap()
    }

    #[test]
    fn matches_naive_loops() {
        for seed in 0..5 {
            let inst = instance(25, 2, seed);
            let d = drsmd_estimate(&inst.fits, &inst.corr, &inst.k).unwrap();
            let naive = naive_theta(&inst, &inst.corr.ratio);
            assert!((&d.theta - naive).amax() < 1e-10);
            let r = rsmd_estimate(&inst.fits, &inst.k).unwrap();
            let naive_r = naive_theta(&inst, &DMatrix::zeros(25, 2));
            assert!((&r.theta - naive_r).amax() < 1e-10);
        }
    }

    #[test]
    fn zero_correction_reduces_exactly() {
        let inst = instance(25, 2, 9);
        let zero = OrthogonalCorrection::zero(25, 2);
        let a = drsmd_estimate(&inst.fits, &zero, &inst.k).unwrap();
        let b = rsmd_estimate(&inst.fits, &inst.k).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.vcov, b.vcov);
    }

    #[test]
    fn zero_residuals_give_zero_variance() {
        let inst = instance(20, 2, 1);
        let theta = DVector::from_vec(vec![1.0, -2.0]);
        let y = &inst.fits.residual_p * &theta;
        let fits = NuisanceFits::from_fitted(&y, &inst.fits.residual_p, DVector::zeros(20), DMatrix::zeros(20, 2)).unwrap();
        let v = drsmd_variance(&fits, &inst.corr, &inst.k, &theta).unwrap();
        assert!(v.amax() < 1e-20);
        let est = drsmd_estimate(&fits, &inst.corr, &inst.k).unwrap();
        assert!((&est.theta - &theta).amax() < 1e-10);
    }

    #[test]
    fn singular_design_is_refused() {
        let n = 10;
        let z = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let p = DMatrix::from_fn(n, 2, |i, _| (i as f64).sin());
        let y = DVector::from_fn(n, |i, _| i as f64);
        let k = kernel_matrix(&z, &KernelSpec::unit(true)).unwrap();
        let err = smd_estimate(&y, &p, &k).unwrap_err();
        assert!(matches!(err, Error::Identification { .. } | Error::Singular(_)));
    }

    #[test]
    fn moment_vanishes_at_estimate() {
        let inst = instance(30, 2, 4);
        let d = drsmd_estimate(&inst.fits, &inst.corr, &inst.k).unwrap();
        let g = orthogonal_moment(&inst.fits, &inst.corr.ratio, &inst.k, &d.theta).unwrap();
        assert!(g.amax() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn outcome_affine_equivariance(seed in 0u64..1000, c in -3.0f64..3.0, d0 in -2.0f64..2.0, d1 in -2.0f64..2.0) {
            let inst = instance(20, 2, seed);
            let base = drsmd_estimate(&inst.fits, &inst.corr, &inst.k).unwrap();
            let shift = DVector::from_vec(vec![d0, d1]);
            let y = &inst.fits.residual_y * c + &inst.fits.residual_p * &shift;
            let p = inst.fits.residual_p.clone();
            let fits = NuisanceFits::from_fitted(&y, &p, DVector::zeros(20), DMatrix::zeros(20, 2)).unwrap();
            let moved = drsmd_estimate(&fits, &inst.corr, &inst.k).unwrap();
            let expected = &base.theta * c + &shift;
            for k in 0..2 {
                prop_assert!((moved.theta[k] - expected[k]).abs() <= 1e-8 * (1.0 + expected[k].abs()));
            }
        }

        #[test]
        fn row_order_does_not_matter(seed in 0u64..1000, rot in 1usize..19) {
            let inst = instance(19, 2, seed);
            let n = 19;
            let perm: Vec<usize> = (0..n).map(|i| (i * 7 + rot) % n).collect();
            let rows = |m: &DMatrix<f64>| DMatrix::from_fn(n, m.ncols(), |i, c| m[(perm[i], c)]);
            let y = DVector::from_fn(n, |i, _| inst.fits.residual_y[perm[i]]);
            let fits = NuisanceFits::from_fitted(&y, &rows(&inst.fits.residual_p), DVector::zeros(n), DMatrix::zeros(n, 2)).unwrap();
            let corr = OrthogonalCorrection::from_fitted(rows(&inst.corr.g_ptilde), DVector::from_fn(n, |i, _| inst.corr.g_kappa[perm[i]])).unwrap();
            let k = kernel_matrix(&rows(&inst.z), &KernelSpec::unit(true)).unwrap();
            let a = drsmd_estimate(&inst.fits, &inst.corr, &inst.k).unwrap();
            let b = drsmd_estimate(&fits, &corr, &k).unwrap();
            for (x, y) in a.theta.iter().chain(a.se.iter()).zip(b.theta.iter().chain(b.se.iter())) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
