//! Small linear models whose identification status is known analytically.
//!
//! | case | model | instruments |
//! |------|-------|-------------|
//! | `model1` | `y = 2 W1 + 3 W2 + u`, `W1 = 4 Z + v1`, `W2 = Z + v2`, `Z ~ N(0,1)` | `Z` |
//! | `ident1` | `W1 = 4 Z1 + Z2 + v1`, `W2 = Z1 + 3 Z2 + v2`, `Z ~ N(0,1)` independent | `(Z1, Z2)`, `Z1`, `Z2` |
//! | `ident2` | as `ident1` with `Z ~ Bernoulli(0.5)` | as `ident1` |
//! | `identint1` | `y = 2 W + 3 W X + u`, `W = 2 Z + v`, `Z ~ Bernoulli(0.5)`, `X ~ N(0,1)` | `Z` |
//! | `identint2` | as `identint1` with `X ~ N(1,1)` | `Z` |
//! | `identint3` | `y = W + W X + X + u`, `W = 2 Z + v`, `Z, X ~ N(0,1)` | `Z` |
//! | `identint4` | as `identint3` with `Z, X ~ N(1,1)` | `Z` |
//!
//! All draws are independent; `u = 0.5 v1 + sqrt(0.75) e` makes the treatment endogenous.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{identification_report_with, IdentificationOptions, IdentificationReport};
use crate::error::{Error, Result};
use crate::estimators::{
    drsmd_estimate, iv_gmm_estimate, rsmd_estimate, smd_estimate, EstimateResult, EstimatorTag,
};
use crate::kernel::{kernel_matrix, KernelSpec};
use crate::model::DesignMatrices;
use crate::nuisance::{fit_orthogonal_correction, robinson_residualize, LearnerConfig, NuisanceFits};
use crate::simulation::{summarize, MetricsRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CatalogModel {
    M1,
    M2,
    M3,
    M4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CatalogCase {
    Model1,
    Ident1,
    Ident2,
    IdentInt1,
    IdentInt2,
    IdentInt3,
    IdentInt4,
}

impl CatalogCase {
    pub const ALL: [CatalogCase; 7] = [
        CatalogCase::Model1,
        CatalogCase::Ident1,
        CatalogCase::Ident2,
        CatalogCase::IdentInt1,
        CatalogCase::IdentInt2,
        CatalogCase::IdentInt3,
        CatalogCase::IdentInt4,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CatalogCase::Model1 => "model1",
            CatalogCase::Ident1 => "ident1",
            CatalogCase::Ident2 => "ident2",
            CatalogCase::IdentInt1 => "identint1",
            CatalogCase::IdentInt2 => "identint2",
            CatalogCase::IdentInt3 => "identint3",
            CatalogCase::IdentInt4 => "identint4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_', ' '], "");
        let key = match key.as_str() {
            "m1" => "model1",
            other => other,
        };
        CatalogCase::ALL.iter().copied().find(|c| c.name() == key)
    }

    /// Variant `a` is the first listed case of a model, `b` the second.
    pub fn from_model(model: CatalogModel, variant: &str) -> Result<Self> {
        let v = variant.trim().to_ascii_lowercase();
        let case = match (model, v.as_str()) {
            (CatalogModel::M1, "" | "a") => CatalogCase::Model1,
            (CatalogModel::M2, "a") => CatalogCase::Ident1,
            (CatalogModel::M2, "b") => CatalogCase::Ident2,
            (CatalogModel::M3, "a") => CatalogCase::IdentInt1,
            (CatalogModel::M3, "b") => CatalogCase::IdentInt2,
            (CatalogModel::M4, "a") => CatalogCase::IdentInt3,
            (CatalogModel::M4, "b") => CatalogCase::IdentInt4,
            _ => return Err(Error::Config(format!("unknown variant '{variant}' for {model:?}"))),
        };
        Ok(case)
    }

    pub fn model(&self) -> CatalogModel {
        match self {
            CatalogCase::Model1 => CatalogModel::M1,
            CatalogCase::Ident1 | CatalogCase::Ident2 => CatalogModel::M2,
            CatalogCase::IdentInt1 | CatalogCase::IdentInt2 => CatalogModel::M3,
            CatalogCase::IdentInt3 | CatalogCase::IdentInt4 => CatalogModel::M4,
        }
    }

    pub fn beta(&self) -> [f64; 2] {
        match self.model() {
            CatalogModel::M1 | CatalogModel::M2 | CatalogModel::M3 => [2.0, 3.0],
            CatalogModel::M4 => [1.0, 1.0],
        }
    }

    /// Estimator and instrument-set pairs reported for the case.
    pub fn estimators(&self) -> Vec<(EstimatorTag, &'static str)> {
        match self.model() {
            CatalogModel::M1 => vec![(EstimatorTag::Smd, "Z")],
            CatalogModel::M2 => vec![
                (EstimatorTag::Smd, "(Z1, Z2)"),
                (EstimatorTag::Smd, "Z1"),
                (EstimatorTag::Smd, "Z2"),
                (EstimatorTag::Iv, "(Z1, Z2)"),
            ],
            CatalogModel::M3 => vec![(EstimatorTag::Smd, "Z")],
            CatalogModel::M4 => vec![(EstimatorTag::Rsmd, "Z"), (EstimatorTag::Drsmd, "Z")],
        }
    }
}

/// One draw from a catalog model.
#[derive(Debug, Clone)]
pub struct CatalogSample {
    pub y: DVector<f64>,
    /// `n x 2`.
    pub p: DMatrix<f64>,
    /// Controls (`n x 1` for the interaction models, empty otherwise).
    pub x: DMatrix<f64>,
    pub instruments: Vec<(&'static str, DVector<f64>)>,
}

impl CatalogSample {
    pub fn instrument_matrix(&self, set: &str) -> Result<DMatrix<f64>> {
        let names: Vec<&str> = set.trim_matches(['(', ')']).split(',').map(str::trim).collect();
        let n = self.y.len();
        let mut m = DMatrix::zeros(n, names.len());
        for (c, name) in names.iter().enumerate() {
            let col = self
                .instruments
                .iter()
                .find(|(k, _)| k == name)
                .ok_or_else(|| Error::Config(format!("instrument '{name}' is not part of this model")))?;
            m.set_column(c, &col.1);
        }
        Ok(m)
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn bern<R: Rng>(rng: &mut R) -> f64 {
    if rng.random::<f64>() < 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Draws `n` observations of `case`, row by row.
pub fn generate_catalog<R: Rng>(case: CatalogCase, n: usize, rng: &mut R) -> Result<CatalogSample> {
    if n < 10 {
        return Err(Error::InsufficientData { n, required: 10 });
    }
    let [b1, b2] = case.beta();
    let mut y = DVector::zeros(n);
    let mut p = DMatrix::zeros(n, 2);
    let has_x = matches!(case.model(), CatalogModel::M3 | CatalogModel::M4);
    let mut x = DMatrix::zeros(n, usize::from(has_x));
    let two = matches!(case.model(), CatalogModel::M2);
    let mut z1 = DVector::zeros(n);
    let mut z2 = DVector::zeros(n);
    for i in 0..n {
        let (za, zb) = match case {
            CatalogCase::Model1 | CatalogCase::Ident1 | CatalogCase::IdentInt3 => (normal(rng), normal(rng)),
            CatalogCase::Ident2 => (bern(rng), bern(rng)),
            CatalogCase::IdentInt1 | CatalogCase::IdentInt2 => (bern(rng), 0.0),
            CatalogCase::IdentInt4 => (1.0 + normal(rng), 0.0),
        };
        let xi = match case {
            CatalogCase::IdentInt1 | CatalogCase::IdentInt3 => normal(rng),
            CatalogCase::IdentInt2 | CatalogCase::IdentInt4 => 1.0 + normal(rng),
            _ => 0.0,
        };
        let v1 = normal(rng);
        let v2 = normal(rng);
        let e = normal(rng);
        let u = 0.5 * v1 + 0.75f64.sqrt() * e;
        let (w1, w2, extra) = match case.model() {
            CatalogModel::M1 => (4.0 * za + v1, za + v2, 0.0),
            CatalogModel::M2 => (4.0 * za + zb + v1, za + 3.0 * zb + v2, 0.0),
            CatalogModel::M3 => {
                let w = 2.0 * za + v1;
                (w, w * xi, 0.0)
            }
            CatalogModel::M4 => {
                let w = 2.0 * za + v1;
                (w, w * xi, xi)
            }
        };
        z1[i] = za;
        z2[i] = zb;
        if has_x {
            x[(i, 0)] = xi;
        }
        p[(i, 0)] = w1;
        p[(i, 1)] = w2;
        y[i] = b1 * w1 + b2 * w2 + extra + u;
    }
    let instruments = if two { vec![("Z1", z1), ("Z2", z2)] } else { vec![("Z", z1)] };
    Ok(CatalogSample { y, p, x, instruments })
}

fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

fn estimate_one(
    tag: EstimatorTag,
    s: &CatalogSample,
    set: &str,
    fits: Option<&NuisanceFits>,
    learner: &LearnerConfig,
) -> Result<EstimateResult> {
    let z = s.instrument_matrix(set)?;
    let spec = KernelSpec::unit(false);
    match tag {
        EstimatorTag::Smd => smd_estimate(&s.y, &s.p, &kernel_matrix(&z, &spec)?),
        EstimatorTag::Iv | EstimatorTag::Gmm => iv_gmm_estimate(&s.y, &s.p, &DMatrix::zeros(s.y.len(), 0), &z),
        EstimatorTag::Rsmd => {
            let fits = fits.ok_or_else(|| Error::Config("missing first-stage fits".into()))?;
            rsmd_estimate(fits, &kernel_matrix(&z, &spec)?)
        }
        EstimatorTag::Drsmd => {
            let fits = fits.ok_or_else(|| Error::Config("missing first-stage fits".into()))?;
            let k = kernel_matrix(&z, &spec)?;
            let corr = fit_orthogonal_correction(fits, &k, &s.x, learner)?;
            drsmd_estimate(fits, &corr, &k)
        }
        other => Err(Error::Config(format!("{} is not part of the catalog runs", other.label()))),
    }
}

fn first_stage(s: &CatalogSample, learner: &LearnerConfig) -> Result<NuisanceFits> {
    let z = s.instrument_matrix(s.instruments[0].0)?;
    let design = DesignMatrices::from_parts(s.y.clone(), s.p.clone(), s.x.clone(), z)?;
    robinson_residualize(&design, learner)
}

/// Monte Carlo metrics for every estimator listed for `case`.
pub fn appendix_catalog_run(case: CatalogCase, n: usize, reps: usize, seed: u64) -> Result<Vec<MetricsRow>> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let ests = case.estimators();
    let needs_fits = ests.iter().any(|(t, _)| matches!(t, EstimatorTag::Rsmd | EstimatorTag::Drsmd));
    let draws: Vec<Vec<Option<[(f64, f64); 2]>>> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<Option<[(f64, f64); 2]>>> {
            let s = generate_catalog(case, n, &mut rep_rng(seed, rep))?;
            let learner = LearnerConfig::lasso(5).with_seed(seed.wrapping_add(rep as u64));
            let fits = if needs_fits { first_stage(&s, &learner).ok() } else { None };
            Ok(ests
                .iter()
                .map(|(tag, set)| {
                    let e = estimate_one(*tag, &s, set, fits.as_ref(), &learner).ok()?;
                    let d = [(e.theta[0], e.se[0]), (e.theta[1], e.se[1])];
                    d.iter().all(|(t, s)| t.is_finite() && s.is_finite()).then_some(d)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let beta = case.beta();
    let mut rows = Vec::new();
    for (e, (tag, set)) in ests.iter().enumerate() {
        let ok: Vec<&[(f64, f64); 2]> = draws.iter().filter_map(|d| d[e].as_ref()).collect();
        let failures = reps - ok.len();
        for k in 0..2 {
            let values: Vec<(f64, f64)> = ok.iter().map(|d| d[k]).collect();
            rows.push(summarize(tag.label(), set, &format!("beta_{}", k + 1), beta[k], &values, failures));
        }
    }
    Ok(rows)
}

/// Identification reports for every estimator of `case` on one draw.
pub fn catalog_identification(
    case: CatalogCase,
    n: usize,
    seed: u64,
    opts: &IdentificationOptions,
) -> Result<Vec<(String, IdentificationReport)>> {
    let s = generate_catalog(case, n, &mut rep_rng(seed, 0))?;
    let learner = LearnerConfig::lasso(5).with_seed(seed);
    let mut out = Vec::new();
    let mut fits_cache = None;
    let spec = KernelSpec::unit(false);
    for (tag, set) in case.estimators() {
        let z = s.instrument_matrix(set)?;
        let report = match tag {
            EstimatorTag::Iv | EstimatorTag::Gmm => continue,
            EstimatorTag::Smd => {
                let k = kernel_matrix(&z, &spec)?;
                identification_report_with(tag, &NuisanceFits::untransformed(&s.y, &s.p), None, &k, opts)?
            }
            EstimatorTag::Rsmd | EstimatorTag::Drsmd => {
                if fits_cache.is_none() {
                    fits_cache = Some(first_stage(&s, &learner)?);
                }
                let fits = fits_cache.as_ref().unwrap();
                let k = kernel_matrix(&z, &spec)?;
                if tag == EstimatorTag::Drsmd {
                    let corr = fit_orthogonal_correction(fits, &k, &s.x, &learner)?;
                    identification_report_with(tag, fits, Some(&corr), &k, opts)?
                } else {
                    identification_report_with(tag, fits, None, &k, opts)?
                }
            }
            _ => continue,
        };
        out.push((set.to_string(), report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identification::Verdict;

    #[test]
    fn names_round_trip() {
        for c in CatalogCase::ALL {
            assert_eq!(CatalogCase::parse(c.name()), Some(c));
        }
        assert_eq!(CatalogCase::parse("M1"), Some(CatalogCase::Model1));
        assert_eq!(CatalogCase::from_model(CatalogModel::M4, "b").unwrap(), CatalogCase::IdentInt4);
        assert!(CatalogCase::from_model(CatalogModel::M2, "z").is_err());
    }

    #[test]
    fn single_replication_rows_are_finite() {
        let rows = appendix_catalog_run(CatalogCase::Ident2, 300, 1, 3).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.med_bias.is_finite() && r.failures == 0));
    }

    #[test]
    fn first_stage_structure() {
        let s = generate_catalog(CatalogCase::IdentInt2, 50_000, &mut rep_rng(1, 0)).unwrap();
        assert!((s.x.column(0).mean() - 1.0).abs() < 0.02);
        let z = &s.instruments[0].1;
        assert!(z.iter().all(|v| *v == 0.0 || *v == 1.0));
        for i in 0..100 {
            assert!((s.p[(i, 1)] - s.p[(i, 0)] * s.x[(i, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn model1_is_flagged_and_ident2_is_not() {
        let opts = IdentificationOptions::default();
        for seed in 1..=3 {
            let m1 = catalog_identification(CatalogCase::Model1, 2000, seed, &opts).unwrap();
            assert_ne!(m1[0].1.verdict, Verdict::Identified);
            let m2 = catalog_identification(CatalogCase::Ident2, 2000, seed, &opts).unwrap();
            assert!(m2.iter().all(|(_, r)| r.verdict == Verdict::Identified));
            // Standardized scales make the two designs comparable.
            let weak = m1[0].1.standardized_min_singular_value;
            let strong = m2[0].1.standardized_min_singular_value;
            assert!(weak < 0.1 * strong, "{weak} vs {strong}");
        }
    }

    #[test]
    fn one_parameter_designs_are_flagged() {
        let opts = IdentificationOptions::default();
        for case in [CatalogCase::Ident1, CatalogCase::IdentInt1, CatalogCase::IdentInt2] {
            let reports = catalog_identification(case, 2000, 7, &opts).unwrap();
            for (set, r) in reports {
                let expected = if set.contains(',') { Verdict::Identified } else { Verdict::NearSingular };
                assert_eq!(r.verdict, expected, "{} {set}", case.name());
            }
        }
    }

    #[test]
    fn correction_keeps_identification() {
        let opts = IdentificationOptions::default();
        for case in [CatalogCase::IdentInt3, CatalogCase::IdentInt4] {
            let reports = catalog_identification(case, 1000, 11, &opts).unwrap();
            let verdict = |tag| reports.iter().find(|(_, r)| r.tag == tag).unwrap().1.verdict;
            if verdict(EstimatorTag::Rsmd) == Verdict::Identified {
                assert_eq!(verdict(EstimatorTag::Drsmd), Verdict::Identified);
            }
        }
    }
}
