//! Point estimators and inference.

mod gmm;
mod smd;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::ParameterVector;
use crate::numeric::{condition_number, singular_values};

pub use gmm::{gmm_linear_controls, gmm_oracle_estimate, iv_gmm_estimate, rgmm_estimate};
pub use smd::{
    drsmd_estimate, drsmd_variance, identifying_matrix, moment_from_sums, orthogonal_moment, rsmd_estimate, smd_estimate,
    smd_type_estimate, SmdOptions, MAX_CONDITION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorTag {
    #[serde(rename = "D-RSMD")]
    Drsmd,
    #[serde(rename = "RSMD")]
    Rsmd,
    #[serde(rename = "SMD")]
    Smd,
    #[serde(rename = "IV")]
    Iv,
    #[serde(rename = "GMM")]
    Gmm,
    #[serde(rename = "R-GMM")]
    Rgmm,
    #[serde(rename = "GMM-Oracle")]
    GmmOracle,
}

impl EstimatorTag {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorTag::Drsmd => "D-RSMD",
            EstimatorTag::Rsmd => "RSMD",
            EstimatorTag::Smd => "SMD",
            EstimatorTag::Iv => "IV",
            EstimatorTag::Gmm => "GMM",
            EstimatorTag::Rgmm => "R-GMM",
            EstimatorTag::GmmOracle => "GMM-Oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Some(match key.as_str() {
            "drsmd" => EstimatorTag::Drsmd,
            "rsmd" => EstimatorTag::Rsmd,
            "smd" => EstimatorTag::Smd,
            "iv" | "2sls" | "tsls" => EstimatorTag::Iv,
            "gmm" => EstimatorTag::Gmm,
            "rgmm" | "gmmlasso" => EstimatorTag::Rgmm,
            "gmmoracle" | "oracle" => EstimatorTag::GmmOracle,
            _ => return None,
        })
    }
}

/// Weighting used by the moment-based estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GmmWeighting {
    JustIdentified,
    /// First step `(Z'Z)^-1`, second step inverse of the HC0 moment covariance.
    TwoStepHc0,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub tag: EstimatorTag,
    pub theta: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub se: DVector<f64>,
    pub hypothesized: DVector<f64>,
    pub t_stats: DVector<f64>,
    pub p_values: DVector<f64>,
    /// Identifying matrix (normalized kernel cross-moment or instrument cross-moment).
    pub a_matrix: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub condition_number: f64,
    pub weighting: Option<GmmWeighting>,
    pub n_used: usize,
    pub warnings: Vec<String>,
}

fn two_sided_p(t: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    if t.is_finite() {
        2.0 * normal.sf(t.abs())
    } else {
        f64::NAN
    }
}

/// Two-sided standard-normal critical value at `level`.
pub fn normal_critical_value(level: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - level / 2.0)
}

impl EstimateResult {
    pub(crate) fn assemble(
        tag: EstimatorTag,
        theta: DVector<f64>,
        vcov: DMatrix<f64>,
        a_matrix: DMatrix<f64>,
        n_used: usize,
    ) -> Self {
        let vcov = (&vcov + vcov.transpose()) * 0.5;
        let sv = singular_values(&a_matrix);
        let cond = condition_number(&sv);
        let mut out = Self {
            tag,
            se: DVector::zeros(theta.len()),
            hypothesized: DVector::zeros(theta.len()),
            t_stats: DVector::zeros(theta.len()),
            p_values: DVector::zeros(theta.len()),
            theta,
            vcov,
            a_matrix,
            singular_values: sv,
            condition_number: cond,
            weighting: None,
            n_used,
            warnings: Vec::new(),
        };
        out.se = DVector::from_iterator(out.theta.len(), (0..out.theta.len()).map(|k| out.vcov[(k, k)].max(0.0).sqrt()));
        out.refresh_tests();
        out
    }

    fn refresh_tests(&mut self) {
        for k in 0..self.theta.len() {
            let t = (self.theta[k] - self.hypothesized[k]) / self.se[k];
            self.t_stats[k] = t;
            self.p_values[k] = two_sided_p(t);
        }
    }

    /// Re-centres the t statistics at `nulls`.
    pub fn with_null(mut self, nulls: &[f64]) -> Self {
        self.hypothesized = DVector::from_column_slice(nulls);
        self.refresh_tests();
        self
    }

    pub fn parameters(&self) -> ParameterVector {
        ParameterVector::from_slice(self.theta.as_slice())
    }

    pub fn p(&self) -> usize {
        self.theta.len()
    }
}

/// Per-coefficient rejection of `theta_k = null_k` at `level` with normal critical values.
pub fn t_test(result: &EstimateResult, nulls: &[f64], level: f64) -> Result<Vec<bool>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("test level {level} is outside (0, 1)")));
    }
    if nulls.len() != result.p() {
        return Err(Error::Config("null vector length does not match the estimate".into()));
    }
    let crit = normal_critical_value(level);
    (0..result.p())
        .map(|k| {
            let se = result.se[k];
            if !(se > 0.0) {
                return Err(Error::UndefinedTest(k));
            }
            Ok(((result.theta[k] - nulls[k]) / se).abs() > crit)
        })
        .collect()
}

/// Average effect `theta_w + theta_wx' mean_x1` with a delta-method standard error that
/// treats `mean_x1` as fixed.
pub fn late(result: &EstimateResult, mean_x1: &[f64]) -> Result<(f64, f64)> {
    if mean_x1.len() + 1 != result.p() {
        return Err(Error::Config("covariate means must match the interaction terms".into()));
    }
    let grad = DVector::from_iterator(result.p(), std::iter::once(1.0).chain(mean_x1.iter().copied()));
    let est = grad.dot(&result.theta);
    let var = (grad.transpose() * &result.vcov * &grad)[(0, 0)];
    Ok((est, var.max(0.0).sqrt()))
}

/// Significance marker: `***` 1%, `**` 5%, `*` 10%, `.` 15%.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else if p < 0.15 {
        "."
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(theta: f64, se: f64) -> EstimateResult {
        EstimateResult::assemble(
            EstimatorTag::Iv,
            DVector::from_element(1, theta),
            DMatrix::from_element(1, 1, se * se),
            DMatrix::identity(1, 1),
            100,
        )
    }

    #[test]
    fn t_test_cases() {
        assert_eq!(t_test(&result(2.0, 0.3), &[2.0], 0.05).unwrap(), vec![false]);
        assert_eq!(t_test(&result(2.5, 0.1), &[2.0], 0.05).unwrap(), vec![true]);
        assert_eq!(t_test(&result(2.19, 0.1), &[2.0], 0.05).unwrap(), vec![false]);
        assert!(matches!(t_test(&result(1.0, 0.0), &[0.0], 0.05), Err(Error::UndefinedTest(0))));
    }

    #[test]
    fn critical_value_matches_quantile() {
        assert!((normal_critical_value(0.05) - 1.959_963_985).abs() < 1e-6);
        let r = result(2.19, 0.1).with_null(&[2.0]);
        assert!((r.t_stats[0] - 1.9).abs() < 1e-9);
        assert!((r.p_values[0] - 0.057_433_46).abs() < 1e-6);
    }

    #[test]
    fn stars_thresholds() {
        assert_eq!(significance_stars(0.005), "***");
        assert_eq!(significance_stars(0.03), "**");
        assert_eq!(significance_stars(0.07), "*");
        assert_eq!(significance_stars(0.12), ".");
        assert_eq!(significance_stars(0.5), "");
    }

    #[test]
    fn late_delta_method() {
        let r = EstimateResult::assemble(
            EstimatorTag::Drsmd,
            DVector::from_vec(vec![2.0, 3.0]),
            DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]),
            DMatrix::identity(2, 2),
            10,
        );
        let (est, se) = late(&r, &[0.5]).unwrap();
        assert!((est - 3.5).abs() < 1e-15);
        assert!((se - (0.04f64 + 2.0 * 0.5 * 0.01 + 0.25 * 0.09).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn tag_parsing() {
        assert_eq!(EstimatorTag::parse("D-RSMD"), Some(EstimatorTag::Drsmd));
        assert_eq!(EstimatorTag::parse("gmm_oracle"), Some(EstimatorTag::GmmOracle));
        assert_eq!(EstimatorTag::parse("2SLS"), Some(EstimatorTag::Iv));
        assert_eq!(EstimatorTag::parse("forest"), None);
    }
}
