//! Conditional-mean nuisance functions.
//!
//! The first stage removes `E(y|X)` and `E(P|X)` from the outcome and the
//! treatment block. The second stage regresses leave-one-out kernel averages
//! of the residualized treatment, and of the weights themselves, on the
//! controls; their ratio is the orthogonal correction.

pub mod lasso;
pub mod nw;
pub mod poly;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{pair_sums, KernelMatrix};
use crate::model::DesignMatrices;
pub use lasso::{lasso_cv_fit, lasso_fit, LassoFit, LassoOptions};
pub use nw::{nw_fit, BandwidthRule, NwFit};
pub use poly::poly_features;

/// Lower bound applied to the fitted kernel-mass regression.
pub const KAPPA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LearnerKind {
    LassoCv { max_degree: usize, folds: usize, lambda_grid_size: usize },
    NadarayaWatson { bandwidth: BandwidthRule },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    /// Seed for fold assignment.
    pub seed: u64,
    /// Fit on one half and predict the other, instead of full-sample fits.
    pub cross_fit: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self::lasso(5)
    }
}

impl LearnerConfig {
    pub fn lasso(max_degree: usize) -> Self {
        Self {
            kind: LearnerKind::LassoCv { max_degree, folds: 5, lambda_grid_size: 100 },
            seed: 0,
            cross_fit: false,
        }
    }

    pub fn nadaraya_watson(bandwidth: BandwidthRule) -> Self {
        Self { kind: LearnerKind::NadarayaWatson { bandwidth }, seed: 0, cross_fit: false }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            LearnerKind::LassoCv { max_degree, folds, lambda_grid_size } => {
                if *max_degree < 1 || *folds < 2 || *lambda_grid_size < 1 {
                    return Err(Error::Config("lasso needs degree >= 1, folds >= 2 and a non-empty grid".into()));
                }
            }
            LearnerKind::NadarayaWatson { bandwidth: BandwidthRule::Fixed(h) } => {
                if h.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::Config("fixed bandwidths must be positive".into()));
                }
            }
            LearnerKind::NadarayaWatson { .. } => {}
        }
        Ok(())
    }
}

/// Selected tuning for one fitted target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnerMeta {
    pub target: String,
    pub lambda: Option<f64>,
    pub support: Option<usize>,
    pub bandwidths: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum FittedLearner {
    Lasso { fit: LassoFit, max_degree: usize },
    Nw(NwFit),
}

impl FittedLearner {
    /// Predictions at new control rows (raw covariates, not features).
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        match self {
            FittedLearner::Lasso { fit, max_degree } => Ok(fit.predict(&poly_features(x, *max_degree)?)),
            FittedLearner::Nw(fit) => Ok(fit.predict(x)),
        }
    }

    fn meta(&self, target: &str) -> LearnerMeta {
        match self {
            FittedLearner::Lasso { fit, .. } => LearnerMeta {
                target: target.into(),
                lambda: Some(fit.lambda),
                support: Some(fit.support),
                bandwidths: None,
            },
            FittedLearner::Nw(fit) => LearnerMeta {
                target: target.into(),
                lambda: None,
                support: None,
                bandwidths: Some(fit.bandwidths.clone()),
            },
        }
    }

    fn warnings(&self) -> &[String] {
        match self {
            FittedLearner::Lasso { fit, .. } => &fit.warnings,
            FittedLearner::Nw(fit) => &fit.warnings,
        }
    }
}

/// Fits `target` on the controls `x` and returns the learner plus its in-sample fitted values
/// (leave-one-out for kernel regression).
pub fn fit_learner(x: &DMatrix<f64>, target: &[f64], cfg: &LearnerConfig) -> Result<(FittedLearner, DVector<f64>)> {
    match &cfg.kind {
        LearnerKind::LassoCv { max_degree, folds, lambda_grid_size } => {
            let features = poly_features(x, *max_degree)?;
            let fit = lasso_cv_fit(&features, target, *folds, *lambda_grid_size, cfg.seed, &LassoOptions::default())?;
            let fitted = fit.predict(&features);
            Ok((FittedLearner::Lasso { fit, max_degree: *max_degree }, fitted))
        }
        LearnerKind::NadarayaWatson { bandwidth } => {
            let fit = nw_fit(x, target, bandwidth)?;
            let fitted = fit.fitted.clone();
            Ok((FittedLearner::Nw(fit), fitted))
        }
    }
}

fn take_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
}

/// Fitted conditional means for one target, full-sample or two-fold cross-fitted.
fn fitted_values(x: &DMatrix<f64>, target: &[f64], cfg: &LearnerConfig, name: &str) -> Result<(DVector<f64>, LearnerMeta, Vec<String>)> {
    if !cfg.cross_fit {
        let (learner, fitted) = fit_learner(x, target, cfg)?;
        return Ok((fitted, learner.meta(name), learner.warnings().to_vec()));
    }
    let n = x.nrows();
    let halves = lasso::fold_assignment(n, 2, cfg.seed ^ 0x5eed_c0de);
    let mut out = DVector::zeros(n);
    let mut meta = None;
    let mut warnings = Vec::new();
    for h in 0..2 {
        let train: Vec<usize> = (0..n).filter(|&i| halves[i] != h).collect();
        let test: Vec<usize> = (0..n).filter(|&i| halves[i] == h).collect();
        let ty: Vec<f64> = train.iter().map(|&i| target[i]).collect();
        let (learner, _) = fit_learner(&take_rows(x, &train), &ty, cfg)?;
        let pred = learner.predict(&take_rows(x, &test))?;
        for (r, &i) in test.iter().enumerate() {
            out[i] = pred[r];
        }
        warnings.extend(learner.warnings().iter().cloned());
        meta.get_or_insert_with(|| learner.meta(name));
    }
    Ok((out, meta.unwrap(), warnings))
}

/// First-stage fits and residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFits {
    pub g_y: DVector<f64>,
    /// `n x p`.
    pub g_p: DMatrix<f64>,
    pub residual_y: DVector<f64>,
    pub residual_p: DMatrix<f64>,
    pub learner_meta: Vec<LearnerMeta>,
    pub warnings: Vec<String>,
}

impl NuisanceFits {
    /// Residuals from given conditional means.
    pub fn from_fitted(y: &DVector<f64>, p: &DMatrix<f64>, g_y: DVector<f64>, g_p: DMatrix<f64>) -> Result<Self> {
        if g_y.len() != y.len() || g_p.shape() != p.shape() {
            return Err(Error::Data("fitted values do not match the design".into()));
        }
        if g_y.iter().chain(g_p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite fitted values".into()));
        }
        Ok(Self {
            residual_y: y - &g_y,
            residual_p: p - &g_p,
            g_y,
            g_p,
            learner_meta: Vec::new(),
            warnings: Vec::new(),
        })
    }

    /// Zero conditional means: residuals equal the raw data.
    pub fn untransformed(y: &DVector<f64>, p: &DMatrix<f64>) -> Self {
        Self::from_fitted(y, p, DVector::zeros(y.len()), DMatrix::zeros(p.nrows(), p.ncols()))
            .expect("zero fits always match")
    }

    pub fn n(&self) -> usize {
        self.residual_y.len()
    }

    pub fn p(&self) -> usize {
        self.residual_p.ncols()
    }
}

/// Removes conditional means given the controls from `y` and each column of `P`.
pub fn robinson_residualize(design: &DesignMatrices, learner: &LearnerConfig) -> Result<NuisanceFits> {
    learner.validate()?;
    let p = design.p.ncols();
    let targets: Vec<(String, Vec<f64>)> = std::iter::once(("y".to_string(), design.y.as_slice().to_vec()))
        .chain((0..p).map(|c| (format!("P{c}"), design.p.column(c).iter().copied().collect())))
        .collect();
    let fits: Vec<Result<(DVector<f64>, LearnerMeta, Vec<String>)>> = targets
        .par_iter()
        .map(|(name, t)| fitted_values(&design.x, t, learner, name))
        .collect();
    let mut fitted = Vec::with_capacity(fits.len());
    let mut meta = Vec::new();
    let mut warnings = Vec::new();
    for (f, (name, _)) in fits.into_iter().zip(&targets) {
        let (v, m, w) = f?;
        fitted.push(v);
        meta.push(m);
        warnings.extend(w.into_iter().map(|w| format!("{name}: {w}")));
    }
    let g_y = fitted.remove(0);
    let mut g_p = DMatrix::zeros(design.n(), p);
    for (c, col) in fitted.into_iter().enumerate() {
        g_p.set_column(c, &col);
    }
    let mut out = NuisanceFits::from_fitted(&design.y, &design.p, g_y, g_p)?;
    out.learner_meta = meta;
    out.warnings = warnings;
    Ok(out)
}

/// Fitted correction functions and their ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalCorrection {
    /// `n x p` fitted kernel-weighted residual averages.
    pub g_ptilde: DMatrix<f64>,
    /// Fitted kernel mass, floored at [`KAPPA_FLOOR`].
    pub g_kappa: DVector<f64>,
    /// Row-wise `g_ptilde / g_kappa`.
    pub ratio: DMatrix<f64>,
    pub floor_hits: usize,
    pub learner_meta: Vec<LearnerMeta>,
    pub warnings: Vec<String>,
}

impl OrthogonalCorrection {
    /// Correction from given function values; applies the floor.
    pub fn from_fitted(g_ptilde: DMatrix<f64>, g_kappa: DVector<f64>) -> Result<Self> {
        if g_ptilde.nrows() != g_kappa.len() {
            return Err(Error::Data("correction fits have mismatched lengths".into()));
        }
        let n = g_kappa.len();
        let mut floor_hits = 0;
        let g_kappa = g_kappa.map(|v| {
            if v.is_nan() || v < KAPPA_FLOOR {
                floor_hits += 1;
                KAPPA_FLOOR
            } else {
                v
            }
        });
        let mut ratio = g_ptilde.clone();
        for i in 0..n {
            for c in 0..ratio.ncols() {
                ratio[(i, c)] /= g_kappa[i];
            }
        }
        if ratio.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite correction ratio".into()));
        }
        let mut warnings = Vec::new();
        if floor_hits as f64 > 0.05 * n as f64 {
            warnings.push(format!(
                "kernel-mass floor applied on {floor_hits} of {n} rows; instrument support may be degenerate"
            ));
        }
        Ok(Self { g_ptilde, g_kappa, ratio, floor_hits, learner_meta: Vec::new(), warnings })
    }

    /// The identically-zero correction, which turns the orthogonal estimator into the plain one.
    pub fn zero(n: usize, p: usize) -> Self {
        Self {
            g_ptilde: DMatrix::zeros(n, p),
            g_kappa: DVector::from_element(n, 1.0),
            ratio: DMatrix::zeros(n, p),
            floor_hits: 0,
            learner_meta: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

/// Leave-one-out regression targets `T_l = sum_{m != l} P~_m kappa_{m,l} / (n-1)` and
/// `S_l = sum_{m != l} kappa_{m,l} / (n-1)`.
pub fn correction_targets(fits: &NuisanceFits, k: &KernelMatrix) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = fits.n();
    if k.n() != n {
        return Err(Error::Data("kernel and nuisance fits have different sizes".into()));
    }
    let sums = pair_sums(k, &fits.residual_p);
    let scale = 1.0 / (n as f64 - 1.0);
    Ok((sums.u * scale, sums.s * scale))
}

/// Regresses the leave-one-out targets on the controls with `learner`.
pub fn fit_orthogonal_correction(
    fits: &NuisanceFits,
    k: &KernelMatrix,
    x: &DMatrix<f64>,
    learner: &LearnerConfig,
) -> Result<OrthogonalCorrection> {
    learner.validate()?;
    let (t, s) = correction_targets(fits, k)?;
    let p = t.ncols();
    let targets: Vec<(String, Vec<f64>)> = (0..p)
        .map(|c| (format!("T{c}"), t.column(c).iter().copied().collect()))
        .chain(std::iter::once(("S".to_string(), s.as_slice().to_vec())))
        .collect();
    let results: Vec<Result<(DVector<f64>, LearnerMeta, Vec<String>)>> = targets
        .par_iter()
        .map(|(name, tv)| fitted_values(x, tv, learner, name))
        .collect();
    let mut fitted = Vec::new();
    let mut meta = Vec::new();
    let mut warnings = Vec::new();
    for (r, (name, _)) in results.into_iter().zip(&targets) {
        let (v, m, w) = r?;
        fitted.push(v);
        meta.push(m);
        warnings.extend(w.into_iter().map(|w| format!("{name}: {w}")));
    }
    let g_kappa = fitted.pop().unwrap();
    let mut g_ptilde = DMatrix::zeros(fits.n(), p);
    for (c, col) in fitted.into_iter().enumerate() {
        g_ptilde.set_column(c, &col);
    }
    let mut out = OrthogonalCorrection::from_fitted(g_ptilde, g_kappa)?;
    out.learner_meta = meta;
    out.warnings.extend(warnings);
    Ok(out)
}
