//! Monte Carlo experiments on the benchmark design.
//!
//! Replication `r` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `r`,
//! so results do not depend on how replications are scheduled.

pub mod dgp;
pub mod metrics;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    drsmd_estimate, gmm_linear_controls, gmm_oracle_estimate, iv_gmm_estimate, rgmm_estimate, rsmd_estimate,
    smd_estimate, EstimateResult, EstimatorTag,
};
use crate::kernel::{kernel_matrix, KernelMatrix, KernelSpec};
use crate::model::DesignMatrices;
use crate::nuisance::{fit_orthogonal_correction, robinson_residualize, LearnerConfig, NuisanceFits, OrthogonalCorrection};

pub use dgp::{generate_benchmark, BenchmarkSample, DgpConfig, DgpInstrument, X1Kind};
pub use metrics::{metrics_csv, metrics_text, summarize, MetricsRow};

/// Instrument columns available in the benchmark design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstrumentSet {
    Z1,
    Z2,
    /// `(Z1, Z1 X1)`.
    Z1Interacted,
    /// `(Z2, Z2 X1)`.
    Z2Interacted,
    /// `(Z1, Z2)`.
    Z1Z2,
    /// `(Z1, E^(W|X) X1)` with the first-stage treatment fit.
    Z1FittedInteraction,
}

impl InstrumentSet {
    pub fn label(&self) -> &'static str {
        match self {
            InstrumentSet::Z1 => "Z1",
            InstrumentSet::Z2 => "Z2",
            InstrumentSet::Z1Interacted => "(Z1, Z1X1)",
            InstrumentSet::Z2Interacted => "(Z2, Z2X1)",
            InstrumentSet::Z1Z2 => "(Z1, Z2)",
            InstrumentSet::Z1FittedInteraction => "(Z1, E(W|X)X1)",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Some(match key.as_str() {
            "z1" => InstrumentSet::Z1,
            "z2" => InstrumentSet::Z2,
            "z1z1x1" => InstrumentSet::Z1Interacted,
            "z2z2x1" => InstrumentSet::Z2Interacted,
            "z1z2" => InstrumentSet::Z1Z2,
            "z1ewxx1" | "z1fitted" => InstrumentSet::Z1FittedInteraction,
            _ => return None,
        })
    }

    fn needs_fits(&self) -> bool {
        matches!(self, InstrumentSet::Z1FittedInteraction)
    }

    /// Instrument matrix for one sample; `g_w` is the fitted `E(W|X)`.
    pub fn matrix(&self, sample: &BenchmarkSample, g_w: Option<&DVector<f64>>) -> Result<DMatrix<f64>> {
        let n = sample.design.n();
        let x1 = sample.design.x.column(0);
        let (z1, z2) = (&sample.z1, &sample.z2);
        Ok(match self {
            InstrumentSet::Z1 => DMatrix::from_column_slice(n, 1, z1.as_slice()),
            InstrumentSet::Z2 => DMatrix::from_column_slice(n, 1, z2.as_slice()),
            InstrumentSet::Z1Interacted => DMatrix::from_fn(n, 2, |i, c| if c == 0 { z1[i] } else { z1[i] * x1[i] }),
            InstrumentSet::Z2Interacted => DMatrix::from_fn(n, 2, |i, c| if c == 0 { z2[i] } else { z2[i] * x1[i] }),
            InstrumentSet::Z1Z2 => DMatrix::from_fn(n, 2, |i, c| if c == 0 { z1[i] } else { z2[i] }),
            InstrumentSet::Z1FittedInteraction => {
                let g = g_w.ok_or_else(|| Error::Config("fitted-interaction instruments need first-stage fits".into()))?;
                DMatrix::from_fn(n, 2, |i, c| if c == 0 { z1[i] } else { g[i] * x1[i] })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub tag: EstimatorTag,
    pub instruments: InstrumentSet,
}

impl EstimatorSpec {
    pub fn new(tag: EstimatorTag, instruments: InstrumentSet) -> Self {
        Self { tag, instruments }
    }

    fn needs_fits(&self) -> bool {
        matches!(self.tag, EstimatorTag::Drsmd | EstimatorTag::Rsmd | EstimatorTag::Rgmm) || self.instruments.needs_fits()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub estimators: Vec<EstimatorSpec>,
    pub learner: LearnerConfig,
    pub kernel: KernelSpec,
    pub reps: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Lasso with degree-5 polynomials and unstandardized unit-scale kernel weights.
    pub fn new(dgp: DgpConfig, estimators: Vec<EstimatorSpec>, reps: usize, seed: u64) -> Self {
        Self { dgp, estimators, learner: LearnerConfig::lasso(5), kernel: KernelSpec::unit(false), reps, seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.learner.validate()?;
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        Ok(())
    }
}

/// Metrics plus run-level warnings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    pub warnings: Vec<String>,
}

/// Random stream for replication `rep`.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// Fold seed for replication `rep`, distinct across replications.
fn learner_for(learner: &LearnerConfig, rep: usize) -> LearnerConfig {
    learner.clone().with_seed(learner.seed.wrapping_add(rep as u64))
}

/// Per-replication state shared across estimators.
struct Replication<'a> {
    sample: &'a BenchmarkSample,
    fits: Option<NuisanceFits>,
    learner: LearnerConfig,
    kernel_spec: &'a KernelSpec,
    kernels: HashMap<InstrumentSet, KernelMatrix>,
    corrections: HashMap<InstrumentSet, OrthogonalCorrection>,
}

impl<'a> Replication<'a> {
    fn instruments(&self, set: InstrumentSet) -> Result<DMatrix<f64>> {
        let g_w = self.fits.as_ref().map(|f| f.g_p.column(0).into_owned());
        set.matrix(self.sample, g_w.as_ref())
    }

    fn kernel(&mut self, set: InstrumentSet) -> Result<&KernelMatrix> {
        if !self.kernels.contains_key(&set) {
            let k = kernel_matrix(&self.instruments(set)?, self.kernel_spec)?;
            self.kernels.insert(set, k);
        }
        Ok(&self.kernels[&set])
    }

    fn fits(&self) -> Result<&NuisanceFits> {
        self.fits.as_ref().ok_or_else(|| Error::Config("first-stage fits were not computed".into()))
    }

    fn estimate(&mut self, spec: &EstimatorSpec) -> Result<EstimateResult> {
        let design = &self.sample.design;
        match spec.tag {
            EstimatorTag::Drsmd => {
                self.kernel(spec.instruments)?;
                if !self.corrections.contains_key(&spec.instruments) {
                    let corr =
                        fit_orthogonal_correction(self.fits()?, &self.kernels[&spec.instruments], &design.x, &self.learner)?;
                    self.corrections.insert(spec.instruments, corr);
                }
                drsmd_estimate(self.fits()?, &self.corrections[&spec.instruments], &self.kernels[&spec.instruments])
            }
            EstimatorTag::Rsmd => {
                self.kernel(spec.instruments)?;
                rsmd_estimate(self.fits()?, &self.kernels[&spec.instruments])
            }
            EstimatorTag::Smd => {
                self.kernel(spec.instruments)?;
                smd_estimate(&design.y, &design.p, &self.kernels[&spec.instruments])
            }
            EstimatorTag::Rgmm => rgmm_estimate(self.fits()?, &self.instruments(spec.instruments)?),
            EstimatorTag::Gmm => gmm_linear_controls(design, &self.instruments(spec.instruments)?),
            EstimatorTag::GmmOracle => {
                gmm_oracle_estimate(design, &self.instruments(spec.instruments)?, &self.sample.true_f_features)
            }
            EstimatorTag::Iv => {
                let none = DMatrix::zeros(design.n(), 0);
                iv_gmm_estimate(&design.y, &design.p, &none, &self.instruments(spec.instruments)?)
            }
        }
    }
}

type Draw = Option<Vec<(f64, f64)>>;

fn draw_of(r: Result<EstimateResult>) -> Draw {
    let est = r.ok()?;
    let pairs: Vec<(f64, f64)> = est.theta.iter().zip(est.se.iter()).map(|(t, s)| (*t, *s)).collect();
    if pairs.iter().all(|(t, s)| t.is_finite() && s.is_finite()) {
        Some(pairs)
    } else {
        None
    }
}

fn run_replication(cfg: &ExperimentConfig, rep: usize) -> Result<Vec<Draw>> {
    let sample = generate_benchmark(&cfg.dgp, &mut replication_rng(cfg.seed, rep))?;
    Ok(estimate_all(cfg, &sample, rep))
}

fn estimate_all(cfg: &ExperimentConfig, sample: &BenchmarkSample, rep: usize) -> Vec<Draw> {
    let learner = learner_for(&cfg.learner, rep);
    let need_fits = cfg.estimators.iter().any(|e| e.needs_fits());
    // A failed first stage only fails the estimators that depend on it.
    let fits = if need_fits { robinson_residualize(&sample.design, &learner).ok() } else { None };
    let mut state = Replication {
        sample,
        fits,
        learner,
        kernel_spec: &cfg.kernel,
        kernels: HashMap::new(),
        corrections: HashMap::new(),
    };
    cfg.estimators.iter().map(|spec| draw_of(state.estimate(spec))).collect()
}

const PARAMETER_NAMES: [&str; 2] = ["theta_w", "theta_wx"];

fn aggregate(
    labels: &[(String, String)],
    truths: &[Vec<(String, f64)>],
    draws: &[Vec<Draw>],
    warnings: &mut Vec<String>,
) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for (e, (est, inst)) in labels.iter().enumerate() {
        let ok: Vec<&Vec<(f64, f64)>> = draws.iter().filter_map(|d| d[e].as_ref()).collect();
        let failures = draws.len() - ok.len();
        if failures as f64 > 0.1 * draws.len() as f64 {
            warnings.push(format!("{est} with {inst}: {failures} of {} replications failed", draws.len()));
        }
        for (k, (name, truth)) in truths[e].iter().enumerate() {
            let values: Vec<(f64, f64)> = ok.iter().map(|d| d[k]).collect();
            rows.push(summarize(est, inst, name, *truth, &values, failures));
        }
    }
    rows
}

/// Runs every estimator on `reps` independent samples and summarizes the estimates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let results: Vec<Result<Vec<Draw>>> = (0..cfg.reps).into_par_iter().map(|r| run_replication(cfg, r)).collect();
    let draws: Vec<Vec<Draw>> = results.into_iter().collect::<Result<_>>()?;
    let labels: Vec<(String, String)> =
        cfg.estimators.iter().map(|e| (e.tag.label().to_string(), e.instruments.label().to_string())).collect();
    let theta0 = cfg.dgp.theta0();
    let truths: Vec<Vec<(String, f64)>> = cfg
        .estimators
        .iter()
        .map(|_| PARAMETER_NAMES.iter().zip(&theta0).map(|(n, t)| (n.to_string(), *t)).collect())
        .collect();
    let mut warnings = Vec::new();
    let rows = aggregate(&labels, &truths, &draws, &mut warnings);
    Ok(ExperimentOutput { rows, warnings })
}

/// Drops columns that are constant on the sample.
fn non_constant_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let keep: Vec<usize> = (0..m.ncols())
        .filter(|&c| {
            let col = m.column(c);
            col.iter().any(|v| *v != col[0])
        })
        .collect();
    m.select_columns(&keep)
}

fn rows_of(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// One-parameter design on the rows where the binary `X1` equals `value`.
fn subset_design(sample: &BenchmarkSample, value: f64) -> Result<(DesignMatrices, DMatrix<f64>, DMatrix<f64>)> {
    let d = &sample.design;
    let rows: Vec<usize> = (0..d.n()).filter(|&i| d.x[(i, 0)] == value).collect();
    if rows.len() < 10 {
        return Err(Error::InsufficientData { n: rows.len(), required: 10 });
    }
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| d.y[i]));
    let w = DMatrix::from_fn(rows.len(), 1, |r, _| d.p[(rows[r], 0)]);
    let x = non_constant_columns(&rows_of(&d.x, &rows));
    let z = DMatrix::from_fn(rows.len(), 1, |r, _| sample.z1[rows[r]]);
    let f = non_constant_columns(&rows_of(&sample.true_f_features, &rows));
    let design = DesignMatrices::from_parts(y, w, x, z.clone())?;
    Ok((design, z, f))
}

fn subset_rgmm(sample: &BenchmarkSample, value: f64, learner: &LearnerConfig) -> Result<EstimateResult> {
    let (design, z, _) = subset_design(sample, value)?;
    let fits = robinson_residualize(&design, learner)?;
    rgmm_estimate(&fits, &z)
}

fn subset_oracle(sample: &BenchmarkSample, value: f64) -> Result<EstimateResult> {
    let (design, z, f) = subset_design(sample, value)?;
    gmm_oracle_estimate(&design, &z, &f)
}

/// Full-sample orthogonal estimates against split-sample estimates on `X1 = 1` and `X1 = 0`.
///
/// Rows: D-RSMD with `Z1` on the full data; R-GMM and GMM-Oracle with `Z1` on each subset,
/// where the only parameter is the subset's treatment effect `theta_w + theta_wx X1`; and
/// R-GMM and GMM-Oracle with `(Z1, Z1 X1)` on the full data.
pub fn split_sample_scenario(
    dgp: &DgpConfig,
    learner: &LearnerConfig,
    kernel: &KernelSpec,
    reps: usize,
    seed: u64,
) -> Result<ExperimentOutput> {
    if !matches!(dgp.x1_kind, X1Kind::Binary(_)) {
        return Err(Error::Config("the split-sample scenario needs a binary X1".into()));
    }
    let cfg = ExperimentConfig {
        dgp: dgp.clone(),
        estimators: vec![
            EstimatorSpec::new(EstimatorTag::Drsmd, InstrumentSet::Z1),
            EstimatorSpec::new(EstimatorTag::Rgmm, InstrumentSet::Z1Interacted),
            EstimatorSpec::new(EstimatorTag::GmmOracle, InstrumentSet::Z1Interacted),
        ],
        learner: learner.clone(),
        kernel: kernel.clone(),
        reps,
        seed,
    };
    cfg.validate()?;
    let results: Vec<Result<Vec<Draw>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let sample = generate_benchmark(&cfg.dgp, &mut replication_rng(seed, rep))?;
            let mut draws = estimate_all(&cfg, &sample, rep);
            let lr = learner_for(learner, rep);
            for value in [1.0, 0.0] {
                draws.push(draw_of(subset_rgmm(&sample, value, &lr)));
                draws.push(draw_of(subset_oracle(&sample, value)));
            }
            Ok(draws)
        })
        .collect();
    let draws: Vec<Vec<Draw>> = results.into_iter().collect::<Result<_>>()?;
    let full = || vec![("theta_w".to_string(), dgp.theta_w0), ("theta_wx".to_string(), dgp.theta_wx0)];
    let sub = |x1: f64| vec![("theta_w".to_string(), dgp.theta_w0 + dgp.theta_wx0 * x1)];
    let labels = vec![
        ("D-RSMD".to_string(), "Z1".to_string()),
        ("R-GMM".to_string(), "(Z1, Z1X1)".to_string()),
        ("GMM-Oracle".to_string(), "(Z1, Z1X1)".to_string()),
        ("R-GMM".to_string(), "Z1 | X1=1".to_string()),
        ("GMM-Oracle".to_string(), "Z1 | X1=1".to_string()),
        ("R-GMM".to_string(), "Z1 | X1=0".to_string()),
        ("GMM-Oracle".to_string(), "Z1 | X1=0".to_string()),
    ];
    let truths = vec![full(), full(), full(), sub(1.0), sub(1.0), sub(0.0), sub(0.0)];
    let mut warnings = Vec::new();
    let rows = aggregate(&labels, &truths, &draws, &mut warnings);
    Ok(ExperimentOutput { rows, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(reps: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(
            DgpConfig::benchmark(300, 2),
            vec![
                EstimatorSpec::new(EstimatorTag::Drsmd, InstrumentSet::Z1),
                EstimatorSpec::new(EstimatorTag::GmmOracle, InstrumentSet::Z1Interacted),
            ],
            reps,
            11,
        );
        c.learner = LearnerConfig::lasso(3);
        c
    }

    #[test]
    fn one_replication_gives_one_row_per_parameter() {
        let out = run_experiment(&small(1)).unwrap();
        assert_eq!(out.rows.len(), 4);
        for r in &out.rows {
            assert_eq!(r.reps, 1);
            assert!(r.med_bias.is_finite() && r.med_se > 0.0);
            assert!((r.mad - r.med_bias.abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn rerun_is_identical() {
        let a = run_experiment(&small(3)).unwrap();
        let b = run_experiment(&small(3)).unwrap();
        assert_eq!(metrics_csv(&a.rows), metrics_csv(&b.rows));
    }

    #[test]
    fn streams_differ_across_replications() {
        let a = generate_benchmark(&DgpConfig::benchmark(100, 1), &mut replication_rng(5, 0)).unwrap();
        let b = generate_benchmark(&DgpConfig::benchmark(100, 1), &mut replication_rng(5, 1)).unwrap();
        assert_ne!(a.design.y, b.design.y);
    }

    #[test]
    fn instrument_labels_round_trip() {
        for s in [
            InstrumentSet::Z1,
            InstrumentSet::Z2,
            InstrumentSet::Z1Interacted,
            InstrumentSet::Z2Interacted,
            InstrumentSet::Z1Z2,
            InstrumentSet::Z1FittedInteraction,
        ] {
            assert_eq!(InstrumentSet::parse(s.label()), Some(s));
        }
    }

    #[test]
    fn subset_designs_have_one_parameter() {
        let mut dgp = DgpConfig::benchmark(400, 3);
        dgp.x1_kind = X1Kind::Binary(0.2);
        let s = generate_benchmark(&dgp, &mut replication_rng(1, 0)).unwrap();
        let (d, z, f) = subset_design(&s, 1.0).unwrap();
        assert_eq!(d.p.ncols(), 1);
        assert_eq!(d.x.ncols(), 2);
        assert_eq!(z.ncols(), 1);
        assert_eq!(f.ncols(), 4);
        let est = subset_oracle(&s, 1.0).unwrap();
        assert_eq!(est.p(), 1);
    }
}
