//! Rank diagnostics for the kernel-weighted identifying matrix, and a catalog
//! of small models with known identification status.
//!
//! A population matrix of rank `r < p` still has a full-rank sample analog.
//! Its smallest singular value shrinks like `1/n`, while the sampling noise
//! of the matrix entries shrinks like `1/sqrt(n)`. After scaling every column
//! of the residualized regressors to unit standard deviation, the verdict
//! compares the smallest singular value with a projection estimate of that
//! noise, alongside the fixed condition-number threshold.

mod catalog;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EstimatorTag;
use crate::kernel::{pair_sums, KernelMatrix};
use crate::numeric::{condition_number, sample_sd, singular_values};
use crate::nuisance::{NuisanceFits, OrthogonalCorrection};

pub use catalog::{
    appendix_catalog_run, catalog_identification, generate_catalog, CatalogCase, CatalogModel, CatalogSample,
};

/// Condition number above which a matrix is reported as near-singular.
pub const NEAR_SINGULAR_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Identified,
    NearSingular,
    Singular,
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Identified => "Identified",
            Verdict::NearSingular => "NearSingular",
            Verdict::Singular => "Singular",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentificationOptions {
    pub near_singular_condition: f64,
    /// Minimum ratio of the smallest standardized singular value to the sampling noise.
    pub noise_factor: f64,
}

impl Default for IdentificationOptions {
    fn default() -> Self {
        Self { near_singular_condition: NEAR_SINGULAR_CONDITION, noise_factor: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationReport {
    pub tag: EstimatorTag,
    /// Normalized identifying matrix `M / (n (n-1))`.
    pub matrix: DMatrix<f64>,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub condition_number: f64,
    /// Smallest singular value after scaling the regressors to unit standard deviation.
    pub standardized_min_singular_value: f64,
    /// Frobenius norm of the standard errors of the standardized matrix entries.
    pub sampling_noise: Option<f64>,
    pub verdict: Verdict,
    pub n: usize,
    pub notes: Vec<String>,
}

impl IdentificationReport {
    pub fn signal_to_noise(&self) -> Option<f64> {
        self.sampling_noise.map(|s| if s > 0.0 { self.standardized_min_singular_value / s } else { f64::INFINITY })
    }
}

/// Classifies a normalized identifying matrix.
///
/// `scales` are the regressor standard deviations and `noise` the sampling noise of the
/// standardized matrix; without them only the singular and condition checks apply.
pub fn classify(
    tag: EstimatorTag,
    matrix: DMatrix<f64>,
    scales: Option<&[f64]>,
    noise: Option<f64>,
    n: usize,
    opts: &IdentificationOptions,
) -> IdentificationReport {
    let sv = singular_values(&matrix);
    let cond = condition_number(&sv);
    let p = matrix.ncols();
    let standardized = match scales {
        Some(s) => DMatrix::from_fn(p, p, |r, c| matrix[(r, c)] / (s[r] * s[c])),
        None => matrix.clone(),
    };
    let std_min = singular_values(&standardized).last().copied().unwrap_or(0.0);
    let mut notes = Vec::new();
    let smax = sv.first().copied().unwrap_or(0.0);
    let smin = sv.last().copied().unwrap_or(0.0);
    let verdict = if smax == 0.0 || smin <= smax * p.max(1) as f64 * f64::EPSILON {
        notes.push("smallest singular value is zero to working precision".into());
        Verdict::Singular
    } else if cond > opts.near_singular_condition {
        notes.push(format!("condition number {cond:.3e} exceeds {:.1e}", opts.near_singular_condition));
        Verdict::NearSingular
    } else if let Some(noise) = noise.filter(|s| std_min < opts.noise_factor * s) {
        notes.push(format!(
            "smallest standardized singular value {std_min:.3e} is within {} times the sampling noise {noise:.3e}; \
             the population matrix is likely rank deficient and standard errors will be unreliable",
            opts.noise_factor
        ));
        Verdict::NearSingular
    } else {
        Verdict::Identified
    };
    IdentificationReport {
        tag,
        matrix,
        singular_values: sv,
        condition_number: cond,
        standardized_min_singular_value: std_min,
        sampling_noise: noise,
        verdict,
        n,
        notes,
    }
}

/// Report for the orthogonal matrix (with `corr`) or the residualized one (without).
/// Pass [`NuisanceFits::untransformed`] and no correction for the raw version.
pub fn identification_report(
    fits: &NuisanceFits,
    corr: Option<&OrthogonalCorrection>,
    k: &KernelMatrix,
) -> Result<IdentificationReport> {
    let tag = if corr.is_some() { EstimatorTag::Drsmd } else { EstimatorTag::Rsmd };
    identification_report_with(tag, fits, corr, k, &IdentificationOptions::default())
}

pub fn identification_report_with(
    tag: EstimatorTag,
    fits: &NuisanceFits,
    corr: Option<&OrthogonalCorrection>,
    k: &KernelMatrix,
    opts: &IdentificationOptions,
) -> Result<IdentificationReport> {
    if !(opts.near_singular_condition > 1.0 && opts.noise_factor >= 0.0) {
        return Err(Error::Config("identification thresholds must be positive".into()));
    }
    let n = fits.n();
    let p = fits.p();
    let zero;
    let ratio = match corr {
        Some(c) => &c.ratio,
        None => {
            zero = DMatrix::zeros(n, p);
            &zero
        }
    };
    let m = crate::estimators::identifying_matrix(fits, ratio, k)?;
    let scale = 1.0 / (n as f64 * (n as f64 - 1.0));
    let scales: Vec<f64> = (0..p)
        .map(|c| {
            let col: Vec<f64> = fits.residual_p.column(c).iter().copied().collect();
            sample_sd(&col)
        })
        .collect();
    if scales.iter().any(|s| !(*s > 0.0)) {
        return Ok(classify(tag, m * scale, None, None, n, opts));
    }
    let noise = sampling_noise(fits, ratio, k, &scales);
    Ok(classify(tag, m * scale, Some(&scales), Some(noise), n, opts))
}

/// Projection estimate of the entrywise standard errors of the standardized
/// normalized matrix, summarized by their Frobenius norm.
///
/// With `h(l, m) = kappa_{l,m} (P_m - r_l) P_l'`, observation `i` contributes
/// `h1_i + h2_i`, where `h1_i = a_i P_i' / (n-1)` averages over its first
/// slot and `h2_i = (P_i u_i' - sum_l kappa_{i,l} r_l P_l') / (n-1)` over its second.
fn sampling_noise(fits: &NuisanceFits, ratio: &DMatrix<f64>, k: &KernelMatrix, scales: &[f64]) -> f64 {
    let pt = &fits.residual_p;
    let (n, p) = pt.shape();
    let sums = pair_sums(k, pt);
    let products = DMatrix::from_fn(n, p * p, |l, rc| ratio[(l, rc / p)] * pt[(l, rc % p)]);
    let cross = pair_sums(k, &products);
    let denom = n as f64 - 1.0;
    let mut total = 0.0;
    for r in 0..p {
        for c in 0..p {
            let psi = DVector::from_fn(n, |i, _| {
                let a = sums.u[(i, r)] - ratio[(i, r)] * sums.s[i];
                let h1 = a * pt[(i, c)];
                let h2 = pt[(i, r)] * sums.u[(i, c)] - cross.u[(i, r * p + c)];
                (h1 + h2) / denom
            });
            let sd = sample_sd(psi.as_slice());
            let se = sd / (n as f64).sqrt() / (scales[r] * scales[c]);
            total += se * se;
        }
    }
    total.sqrt()
}

/// Plain-text rendering of one report.
pub fn report_text(r: &IdentificationReport) -> String {
    let sv: Vec<String> = r.singular_values.iter().map(|v| format!("{v:.6e}")).collect();
    let mut out = format!(
        "{} identification (n = {})\n  singular values: {}\n  condition number: {:.6e}\n  standardized min singular value: {:.6e}\n",
        r.tag.label(),
        r.n,
        sv.join(", "),
        r.condition_number,
        r.standardized_min_singular_value,
    );
    if let Some(noise) = r.sampling_noise {
        out.push_str(&format!("  sampling noise: {noise:.6e}\n"));
    }
    out.push_str(&format!("  verdict: {}\n", r.verdict.label()));
    for note in &r.notes {
        out.push_str(&format!("  note: {note}\n"));
    }
    out
}
