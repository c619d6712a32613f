//! Run configuration: a TOML document with dotted sections, overridden by flags.
//!
//! ```toml
//! seed = 42
//! threads = 4
//! input = "data.csv"
//! output = "results.txt"
//! format = "text"
//!
//! [model]
//! outcome = "y"
//! treatment = "W"
//! interaction_covariates = ["X1"]
//! controls = ["X1", "X2", "X3"]
//! instruments = ["Z1"]
//!
//! [[estimators]]
//! tag = "D-RSMD"
//! instruments = ["Z1"]
//!
//! [learner]
//! kind = "lasso"        # or "nadaraya-watson"
//! max_degree = 5
//!
//! [kernel]
//! standardize_instruments = true
//!
//! [simulation]
//! design = "benchmark"  # or "categorical", "split-sample"
//! n = 3000
//! q_x = 3
//! reps = 500
//! sample_output = "sample.csv"   # optional: first replication's data
//!
//! [identify]
//! catalog = "model1"
//! n = 2000
//! ```

use std::path::{Path, PathBuf};

use drsmd::estimators::EstimatorTag;
use drsmd::identification::IdentificationOptions;
use drsmd::kernel::KernelSpec;
use drsmd::model::ModelSpec;
use drsmd::nuisance::{BandwidthRule, LearnerConfig, LearnerKind};
use drsmd::simulation::{DgpConfig, X1Kind};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    #[default]
    Text,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub reps: Option<usize>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub estimators: Vec<EstimatorEntry>,
    #[serde(default)]
    pub learner: LearnerSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub identify: IdentifySection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorEntry {
    pub tag: String,
    /// Column names for `estimate`, or one instrument-set label for `simulate`.
    #[serde(default)]
    pub instruments: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSection {
    pub kind: String,
    pub max_degree: usize,
    pub folds: usize,
    pub lambda_grid_size: usize,
    /// Empty for the rule of thumb.
    pub bandwidths: Vec<f64>,
    pub cross_fit: bool,
    pub seed: Option<u64>,
}

impl Default for LearnerSection {
    fn default() -> Self {
        Self {
            kind: "lasso".into(),
            max_degree: 5,
            folds: 5,
            lambda_grid_size: 100,
            bandwidths: Vec::new(),
            cross_fit: false,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub scales: Vec<f64>,
    pub standardize_instruments: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub design: String,
    pub n: usize,
    pub q_x: usize,
    pub reps: Option<usize>,
    pub s: Option<usize>,
    pub theta_w0: Option<f64>,
    pub theta_wx0: Option<f64>,
    pub error_cov: Option<f64>,
    pub z_coupling: Option<f64>,
    pub p_z1: Option<f64>,
    pub p_b: Option<f64>,
    /// Bernoulli probability for a binary first covariate.
    pub x1_binary: Option<f64>,
    /// Writes the first replication's sample to this CSV file.
    pub sample_output: Option<PathBuf>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            design: "benchmark".into(),
            n: 3000,
            q_x: 3,
            reps: None,
            s: None,
            theta_w0: None,
            theta_wx0: None,
            error_cov: None,
            z_coupling: None,
            p_z1: None,
            p_b: None,
            x1_binary: None,
            sample_output: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentifySection {
    pub catalog: Option<String>,
    pub n: usize,
    pub reps: Option<usize>,
    pub near_singular_condition: f64,
    pub noise_factor: f64,
}

impl Default for IdentifySection {
    fn default() -> Self {
        let opts = IdentificationOptions::default();
        Self {
            catalog: None,
            n: 2000,
            reps: None,
            near_singular_condition: opts.near_singular_condition,
            noise_factor: opts.noise_factor,
        }
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub reps: Option<usize>,
    pub catalog: Option<String>,
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub reps: Option<usize>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub format: OutputFormat,
    pub model: Option<ModelSpec>,
    pub estimators: Vec<EstimatorEntry>,
    pub learner: LearnerConfig,
    pub kernel_scales: Vec<f64>,
    pub standardize_instruments: Option<bool>,
    pub simulation: SimulationSection,
    pub identify: IdentifySection,
}

pub const THREADS_ENV: &str = "DRSMD_THREADS";

pub fn load(path: Option<&Path>, flags: Overrides) -> Result<RunConfig, CliError> {
    let file: FileConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let threads = match flags.threads {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))
            })?),
            Err(_) => file.threads,
        },
    };
    let seed = flags.seed.or(file.seed).unwrap_or(0);
    if threads == Some(0) {
        return Err(CliError::Config("thread count must be at least 1".into()));
    }
    let mut identify = file.identify;
    if flags.catalog.is_some() {
        identify.catalog = flags.catalog;
    }
    let learner = learner_config(&file.learner, seed)?;
    Ok(RunConfig {
        seed,
        threads,
        reps: flags.reps.or(file.reps),
        input: flags.input.or(file.input),
        output: flags.output.or(file.output),
        format: flags.format.or(file.format).unwrap_or_default(),
        model: file.model,
        estimators: file.estimators,
        learner,
        kernel_scales: file.kernel.scales,
        standardize_instruments: file.kernel.standardize_instruments,
        simulation: file.simulation,
        identify,
    })
}

fn learner_config(s: &LearnerSection, seed: u64) -> Result<LearnerConfig, CliError> {
    let key = s.kind.to_ascii_lowercase().replace(['-', '_', ' '], "");
    let kind = match key.as_str() {
        "lasso" | "lassocv" => LearnerKind::LassoCv {
            max_degree: s.max_degree,
            folds: s.folds,
            lambda_grid_size: s.lambda_grid_size,
        },
        "nadarayawatson" | "nw" => LearnerKind::NadarayaWatson {
            bandwidth: if s.bandwidths.is_empty() {
                BandwidthRule::RuleOfThumb
            } else {
                BandwidthRule::Fixed(s.bandwidths.clone())
            },
        },
        other => return Err(CliError::Config(format!("unknown learner kind '{other}'"))),
    };
    let cfg = LearnerConfig { kind, seed: s.seed.unwrap_or(seed), cross_fit: s.cross_fit };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

impl RunConfig {
    /// Kernel settings; `default_standardize` applies when the file leaves it unset.
    pub fn kernel(&self, default_standardize: bool) -> KernelSpec {
        KernelSpec::gaussian(self.kernel_scales.clone(), self.standardize_instruments.unwrap_or(default_standardize))
    }

    pub fn identification_options(&self) -> IdentificationOptions {
        IdentificationOptions {
            near_singular_condition: self.identify.near_singular_condition,
            noise_factor: self.identify.noise_factor,
        }
    }

    pub fn dgp(&self) -> Result<DgpConfig, CliError> {
        let s = &self.simulation;
        let key = s.design.to_ascii_lowercase().replace(['-', '_', ' '], "");
        let mut cfg = match key.as_str() {
            "benchmark" | "splitsample" => DgpConfig::benchmark(s.n, s.q_x),
            "categorical" => DgpConfig::categorical(s.n, s.q_x),
            other => return Err(CliError::Config(format!("unknown simulation design '{other}'"))),
        };
        if let Some(v) = s.s {
            cfg.s = v;
        }
        if let Some(v) = s.theta_w0 {
            cfg.theta_w0 = v;
        }
        if let Some(v) = s.theta_wx0 {
            cfg.theta_wx0 = v;
        }
        if let Some(v) = s.error_cov {
            cfg.error_cov = v;
        }
        if let Some(v) = s.z_coupling {
            cfg.z_coupling = v;
        }
        if let Some(v) = s.p_z1 {
            cfg.p_z1 = v;
        }
        if let Some(v) = s.p_b {
            cfg.p_b = v;
        }
        if let Some(p) = s.x1_binary {
            cfg.x1_kind = X1Kind::Binary(p);
        } else if key == "splitsample" {
            cfg.x1_kind = X1Kind::Binary(0.2);
        }
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn is_split_sample(&self) -> bool {
        self.simulation.design.to_ascii_lowercase().replace(['-', '_', ' '], "") == "splitsample"
    }
}

pub fn parse_tag(s: &str) -> Result<EstimatorTag, CliError> {
    EstimatorTag::parse(s).ok_or_else(|| CliError::Config(format!("unrecognized estimator tag '{s}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_document_parses() {
        let doc = r#"
            seed = 7
            format = "json"
            [model]
            outcome = "y"
            treatment = "W"
            interaction_covariates = ["X1"]
            controls = ["X1", "X2"]
            instruments = ["Z1"]
            [[estimators]]
            tag = "D-RSMD"
            [[estimators]]
            tag = "GMM"
            instruments = ["Z1", "Z1*X1"]
            [learner]
            kind = "nadaraya-watson"
            [simulation]
            design = "categorical"
            n = 500
            [identify]
            catalog = "ident2"
        "#;
        let file: FileConfig = toml::from_str(doc).unwrap();
        assert_eq!(file.seed, Some(7));
        assert_eq!(file.format, Some(OutputFormat::Json));
        assert_eq!(file.estimators.len(), 2);
        assert_eq!(file.estimators[1].instruments, vec!["Z1", "Z1*X1"]);
        let learner = learner_config(&file.learner, 7).unwrap();
        assert!(matches!(learner.kind, LearnerKind::NadarayaWatson { bandwidth: BandwidthRule::RuleOfThumb }));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("sede = 1").is_err());
        assert!(toml::from_str::<FileConfig>("[learner]\ndegree = 3").is_err());
    }

    #[test]
    fn bad_learner_is_a_config_error() {
        let s = LearnerSection { kind: "forest".into(), ..LearnerSection::default() };
        assert!(matches!(learner_config(&s, 0), Err(CliError::Config(_))));
        let s = LearnerSection { folds: 1, ..LearnerSection::default() };
        assert!(learner_config(&s, 0).is_err());
    }
}
