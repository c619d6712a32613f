//! Linear IV and two-step GMM with HC0 sandwich covariance.

use nalgebra::{DMatrix, DVector};

use super::{EstimateResult, EstimatorTag, GmmWeighting};
use crate::error::{Error, Result};
use crate::model::DesignMatrices;
use crate::numeric::{solve, solve_vec};
use crate::nuisance::NuisanceFits;

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, a.ncols() + b.ncols());
    out.view_mut((0, 0), (n, a.ncols())).copy_from(a);
    out.view_mut((0, a.ncols()), (n, b.ncols())).copy_from(b);
    out
}

fn under(e: Error) -> Error {
    match e {
        Error::Singular(m) => Error::UnderIdentified(m),
        other => other,
    }
}

/// `(1/n) sum_i e_i^2 z_i z_i'`.
fn moment_covariance(z: &DMatrix<f64>, e: &DVector<f64>) -> DMatrix<f64> {
    let mut zw = z.clone();
    for (i, mut row) in zw.row_iter_mut().enumerate() {
        row *= e[i];
    }
    zw.tr_mul(&zw) / z.nrows() as f64
}

/// Solves `(G' W G) theta = G' W g` for `W = weight^-1`.
fn weighted_step(g: &DMatrix<f64>, gy: &DVector<f64>, weight: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let wg = solve(weight, g).map_err(under)?;
    let wgy = solve_vec(weight, gy).map_err(under)?;
    let lhs = g.tr_mul(&wg);
    let theta = solve_vec(&lhs, &g.tr_mul(&wgy)).map_err(under)?;
    Ok((theta, lhs))
}

/// IV (just-identified) or two-step GMM (over-identified). Exogenous controls act as their
/// own instruments; only the regressor coefficients are returned.
pub fn iv_gmm_estimate(
    y: &DVector<f64>,
    regressors: &DMatrix<f64>,
    exog_controls: &DMatrix<f64>,
    instruments: &DMatrix<f64>,
) -> Result<EstimateResult> {
    let n = y.len();
    let p = regressors.ncols();
    if regressors.nrows() != n || exog_controls.nrows() != n || instruments.nrows() != n {
        return Err(Error::Data("IV blocks have mismatched row counts".into()));
    }
    if instruments.ncols() < p {
        return Err(Error::UnderIdentified(format!("{} instruments for {p} endogenous regressors", instruments.ncols())));
    }
    let x = hstack(regressors, exog_controls);
    let z = hstack(instruments, exog_controls);
    let k = x.ncols();
    if n <= k {
        return Err(Error::InsufficientData { n, required: k + 1 });
    }
    let nf = n as f64;
    let g = z.tr_mul(&x) / nf;
    let gy = z.tr_mul(y) / nf;
    let (theta, bread, weighting, weight) = if z.ncols() == k {
        let theta = solve_vec(&g, &gy).map_err(under)?;
        (theta, None, GmmWeighting::JustIdentified, None)
    } else {
        let zz = z.tr_mul(&z) / nf;
        let (theta1, _) = weighted_step(&g, &gy, &zz)?;
        let s = moment_covariance(&z, &(y - &x * &theta1));
        let (theta2, lhs) = weighted_step(&g, &gy, &s)?;
        (theta2, Some(lhs), GmmWeighting::TwoStepHc0, Some(s))
    };
    let e = y - &x * &theta;
    let s_hat = moment_covariance(&z, &e);
    let vcov = match (bread, weight) {
        (None, _) => {
            let left = solve(&g, &s_hat).map_err(under)?;
            solve(&g, &left.transpose()).map_err(under)?.transpose() / nf
        }
        (Some(lhs), Some(w)) => {
            let wg = solve(&w, &g).map_err(under)?;
            let meat = wg.transpose() * &s_hat * &wg;
            let left = solve(&lhs, &meat).map_err(under)?;
            solve(&lhs, &left.transpose()).map_err(under)?.transpose() / nf
        }
        _ => unreachable!(),
    };
    let tag = if weighting == GmmWeighting::JustIdentified { EstimatorTag::Iv } else { EstimatorTag::Gmm };
    let theta_p = theta.rows(0, p).into_owned();
    let vcov_p = vcov.view((0, 0), (p, p)).into_owned();
    let a = g.view((0, 0), (instruments.ncols(), p)).into_owned();
    let mut out = EstimateResult::assemble(tag, theta_p, vcov_p, a, n);
    out.weighting = Some(weighting);
    Ok(out)
}

fn demeaned(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// IV/GMM on the residualized outcome and treatment block with demeaned instruments.
pub fn rgmm_estimate(fits: &NuisanceFits, instruments: &DMatrix<f64>) -> Result<EstimateResult> {
    let none = DMatrix::zeros(fits.n(), 0);
    let mut out = iv_gmm_estimate(&fits.residual_y, &fits.residual_p, &none, &demeaned(instruments))?;
    out.tag = EstimatorTag::Rgmm;
    Ok(out)
}

fn with_intercept(m: &DMatrix<f64>) -> DMatrix<f64> {
    hstack(&DMatrix::from_element(m.nrows(), 1, 1.0), m)
}

/// IV/GMM with the true nonlinear control features (plus an intercept) as exogenous controls.
pub fn gmm_oracle_estimate(
    design: &DesignMatrices,
    instruments: &DMatrix<f64>,
    true_f_features: &DMatrix<f64>,
) -> Result<EstimateResult> {
    let mut out = iv_gmm_estimate(&design.y, &design.p, &with_intercept(true_f_features), instruments)?;
    out.tag = EstimatorTag::GmmOracle;
    Ok(out)
}

/// IV/GMM treating the control function as linear in the controls (plus an intercept).
pub fn gmm_linear_controls(design: &DesignMatrices, instruments: &DMatrix<f64>) -> Result<EstimateResult> {
    let mut out = iv_gmm_estimate(&design.y, &design.p, &with_intercept(&design.x), instruments)?;
    out.tag = EstimatorTag::Gmm;
    Ok(out)
}
