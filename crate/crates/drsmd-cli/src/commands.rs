//! The three subcommands.

use std::collections::HashMap;

use drsmd::estimators::{
    drsmd_estimate, gmm_linear_controls, rgmm_estimate, rsmd_estimate, significance_stars, smd_estimate,
    EstimateResult, EstimatorTag,
};
use drsmd::identification::{
    appendix_catalog_run, catalog_identification, identification_report_with, CatalogCase, IdentificationReport,
};
use drsmd::kernel::{kernel_matrix, KernelMatrix};
use drsmd::model::{build_design, validate, Dataset, DesignMatrices, ModelSpec, Severity};
use drsmd::nuisance::{fit_orthogonal_correction, robinson_residualize, NuisanceFits, OrthogonalCorrection};
use drsmd::simulation::{
    generate_benchmark, metrics_csv, metrics_text, replication_rng, run_experiment, split_sample_scenario,
    EstimatorSpec, ExperimentConfig, InstrumentSet, MetricsRow,
};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{parse_tag, EstimatorEntry, OutputFormat, RunConfig};
use crate::io::{emit, read_csv, write_csv};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientRow {
    pub estimator: String,
    pub instruments: String,
    pub parameter: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
    pub stars: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationRow {
    pub estimator: String,
    pub instruments: String,
    pub singular_values: Vec<f64>,
    pub condition_number: f64,
    pub standardized_min_singular_value: f64,
    pub sampling_noise: Option<f64>,
    pub verdict: String,
    pub n: usize,
    pub matrix: Vec<Vec<f64>>,
    pub notes: Vec<String>,
}

impl IdentificationRow {
    fn new(instruments: &str, r: &IdentificationReport) -> Self {
        Self {
            estimator: r.tag.label().into(),
            instruments: instruments.into(),
            singular_values: r.singular_values.clone(),
            condition_number: r.condition_number,
            standardized_min_singular_value: r.standardized_min_singular_value,
            sampling_noise: r.sampling_noise,
            verdict: r.verdict.label().into(),
            n: r.n,
            matrix: r.matrix.row_iter().map(|row| row.iter().copied().collect()).collect(),
            notes: r.notes.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateOutput {
    pub n: usize,
    pub coefficients: Vec<CoefficientRow>,
    pub identification: Vec<IdentificationRow>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsOutput {
    pub rows: Vec<MetricsRow>,
    pub identification: Vec<IdentificationRow>,
    pub warnings: Vec<String>,
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Instrument matrix from column names; `A*B` is the elementwise product of two columns.
pub fn instrument_columns(data: &Dataset, names: &[String]) -> Result<DMatrix<f64>, CliError> {
    let n = data.n();
    let mut z = DMatrix::zeros(n, names.len());
    for (c, name) in names.iter().enumerate() {
        let mut col = vec![1.0; n];
        for factor in name.split('*').map(str::trim) {
            let src = data
                .column(factor)
                .ok_or_else(|| CliError::Config(format!("instrument column '{factor}' not found")))?;
            for (v, s) in col.iter_mut().zip(src) {
                *v *= s;
            }
        }
        z.set_column(c, &nalgebra::DVector::from_vec(col));
    }
    Ok(z)
}

struct Pipeline<'a> {
    cfg: &'a RunConfig,
    data: &'a Dataset,
    design: DesignMatrices,
    fits: Option<NuisanceFits>,
    kernels: HashMap<Vec<String>, KernelMatrix>,
}

impl<'a> Pipeline<'a> {
    fn fits(&mut self) -> Result<&NuisanceFits, CliError> {
        if self.fits.is_none() {
            self.fits = Some(robinson_residualize(&self.design, &self.cfg.learner)?);
        }
        Ok(self.fits.as_ref().unwrap())
    }

    fn kernel(&mut self, names: &[String]) -> Result<(), CliError> {
        if !self.kernels.contains_key(names) {
            let z = instrument_columns(self.data, names)?;
            let k = kernel_matrix(&z, &self.cfg.kernel(true))?;
            self.kernels.insert(names.to_vec(), k);
        }
        Ok(())
    }

    fn correction(&mut self, names: &[String]) -> Result<OrthogonalCorrection, CliError> {
        self.kernel(names)?;
        self.fits()?;
        let fits = self.fits.as_ref().unwrap();
        Ok(fit_orthogonal_correction(fits, &self.kernels[names], &self.design.x, &self.cfg.learner)?)
    }

    fn run(
        &mut self,
        tag: EstimatorTag,
        names: &[String],
    ) -> Result<(EstimateResult, Option<IdentificationReport>), CliError> {
        let opts = self.cfg.identification_options();
        match tag {
            EstimatorTag::Drsmd => {
                let corr = self.correction(names)?;
                let fits = self.fits.as_ref().unwrap();
                let k = &self.kernels[names];
                let est = drsmd_estimate(fits, &corr, k)?;
                let rep = identification_report_with(tag, fits, Some(&corr), k, &opts)?;
                Ok((est, Some(rep)))
            }
            EstimatorTag::Rsmd => {
                self.kernel(names)?;
                self.fits()?;
                let fits = self.fits.as_ref().unwrap();
                let k = &self.kernels[names];
                let est = rsmd_estimate(fits, k)?;
                let rep = identification_report_with(tag, fits, None, k, &opts)?;
                Ok((est, Some(rep)))
            }
            EstimatorTag::Smd => {
                self.kernel(names)?;
                let k = &self.kernels[names];
                let est = smd_estimate(&self.design.y, &self.design.p, k)?;
                let raw = NuisanceFits::untransformed(&self.design.y, &self.design.p);
                let rep = identification_report_with(tag, &raw, None, k, &opts)?;
                Ok((est, Some(rep)))
            }
            EstimatorTag::Iv | EstimatorTag::Gmm => {
                let z = instrument_columns(self.data, names)?;
                let mut est = gmm_linear_controls(&self.design, &z)?;
                est.tag = tag;
                Ok((est, None))
            }
            EstimatorTag::Rgmm => {
                let z = instrument_columns(self.data, names)?;
                Ok((rgmm_estimate(self.fits()?, &z)?, None))
            }
            EstimatorTag::GmmOracle => Err(CliError::Config(
                "GMM-Oracle needs the true control function and is only available in simulations".into(),
            )),
        }
    }
}

fn instrument_label(names: &[String]) -> String {
    if names.len() == 1 {
        names[0].clone()
    } else {
        format!("({})", names.join(", "))
    }
}

fn default_entries(cfg: &RunConfig) -> Vec<EstimatorEntry> {
    if cfg.estimators.is_empty() {
        vec![EstimatorEntry { tag: "D-RSMD".into(), instruments: Vec::new() }]
    } else {
        cfg.estimators.clone()
    }
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, ModelSpec, Vec<String>), CliError> {
    let path = cfg.input.as_ref().ok_or_else(|| CliError::Config("no input file given (--input)".into()))?;
    let spec = cfg.model.clone().ok_or_else(|| CliError::Config("the config has no [model] section".into()))?;
    let data = read_csv(path)?;
    let report = validate(&data, &spec);
    let mut warnings = Vec::new();
    for issue in &report.issues {
        match issue.severity {
            Severity::Error => {
                let missing = issue.message.contains("not found") || issue.message.contains("no instrument");
                return Err(if missing { CliError::Config(issue.message.clone()) } else { CliError::Data(issue.message.clone()) });
            }
            Severity::Warning => warnings.push(issue.message.clone()),
        }
    }
    Ok((data, spec, warnings))
}

pub fn estimate(cfg: &RunConfig) -> Result<(), CliError> {
    let (data, spec, mut warnings) = load_data(cfg)?;
    let entries = default_entries(cfg);
    let parsed: Vec<(EstimatorTag, Vec<String>)> = entries
        .iter()
        .map(|e| {
            let names = if e.instruments.is_empty() { spec.instruments.clone() } else { e.instruments.clone() };
            parse_tag(&e.tag).map(|t| (t, names))
        })
        .collect::<Result<_, _>>()?;
    let design = build_design(&data, &spec)?;
    let mut pipe = Pipeline { cfg, data: &data, design, fits: None, kernels: HashMap::new() };
    let names = spec.parameter_names();
    let mut coefficients = Vec::new();
    let mut identification = Vec::new();
    for (tag, inst) in &parsed {
        let (est, rep) = pipe.run(*tag, inst)?;
        let label = instrument_label(inst);
        for k in 0..est.p() {
            coefficients.push(CoefficientRow {
                estimator: tag.label().into(),
                instruments: label.clone(),
                parameter: names[k].clone(),
                estimate: est.theta[k],
                se: est.se[k],
                t: est.t_stats[k],
                p: est.p_values[k],
                stars: significance_stars(est.p_values[k]).into(),
            });
        }
        for w in &est.warnings {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
        if let Some(r) = rep {
            identification.push(IdentificationRow::new(&label, &r));
        }
    }
    let out = EstimateOutput { n: data.n(), coefficients, identification, warnings };
    let json = to_json(&out)?;
    let main = match cfg.format {
        OutputFormat::Json => json.clone(),
        OutputFormat::Csv => coefficients_csv(&out.coefficients),
        OutputFormat::Text => estimate_text(&out),
    };
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    emit(cfg.output.as_ref(), &main, (cfg.format != OutputFormat::Json).then_some(json.as_str()))
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn coefficients_csv(rows: &[CoefficientRow]) -> String {
    let mut out = String::from("estimator,instruments,parameter,estimate,se,t,p,stars\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            quote(&r.estimator),
            quote(&r.instruments),
            quote(&r.parameter),
            r.estimate,
            r.se,
            r.t,
            r.p,
            r.stars
        ));
    }
    out
}

fn align(rows: Vec<Vec<String>>, left: usize) -> String {
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap()).collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| if c < left { format!("{:<w$}", s, w = widths[c]) } else { format!("{:>w$}", s, w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn estimate_text(out: &EstimateOutput) -> String {
    let mut rows = vec![["Estimator", "Instruments", "Parameter", "Estimate", "SE", "t", "p", ""]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    for r in &out.coefficients {
        rows.push(vec![
            r.estimator.clone(),
            r.instruments.clone(),
            r.parameter.clone(),
            format!("{:.4}", r.estimate),
            format!("{:.4}", r.se),
            format!("{:.3}", r.t),
            format!("{:.4}", r.p),
            r.stars.clone(),
        ]);
    }
    let mut text = format!("n = {}\n", out.n);
    text.push_str(&align(rows, 3));
    text.push_str("Significance: *** 1%, ** 5%, * 10%, . 15%\n");
    for r in &out.identification {
        text.push('\n');
        text.push_str(&identification_text(r));
    }
    text
}

fn identification_text(r: &IdentificationRow) -> String {
    let sv: Vec<String> = r.singular_values.iter().map(|v| format!("{v:.6e}")).collect();
    let mut s = format!(
        "{} [{}] identification (n = {})\n  singular values: {}\n  condition number: {:.6e}\n  standardized min singular value: {:.6e}\n",
        r.estimator,
        r.instruments,
        r.n,
        sv.join(", "),
        r.condition_number,
        r.standardized_min_singular_value
    );
    if let Some(noise) = r.sampling_noise {
        s.push_str(&format!("  sampling noise: {noise:.6e}\n"));
    }
    s.push_str(&format!("  verdict: {}\n", r.verdict));
    for note in &r.notes {
        s.push_str(&format!("  note: {note}\n"));
    }
    s
}

fn metrics_main(cfg: &RunConfig, out: &MetricsOutput) -> Result<(String, String), CliError> {
    let json = to_json(out)?;
    let main = match cfg.format {
        OutputFormat::Json => json.clone(),
        OutputFormat::Csv => metrics_csv(&out.rows),
        OutputFormat::Text => {
            let mut parts: Vec<String> = out.identification.iter().map(identification_text).collect();
            if !out.rows.is_empty() {
                parts.push(metrics_text(&out.rows));
            }
            parts.join("\n")
        }
    };
    Ok((main, json))
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let reps = cfg.reps.or(cfg.simulation.reps).unwrap_or(100);
    if reps == 0 {
        return Err(CliError::Config("reps must be at least 1".into()));
    }
    let dgp = cfg.dgp()?;
    if let Some(path) = &cfg.simulation.sample_output {
        let sample = generate_benchmark(&dgp, &mut replication_rng(cfg.seed, 0))?;
        write_csv(&sample.to_dataset(), path)?;
    }
    let kernel = cfg.kernel(false);
    let result = if cfg.is_split_sample() {
        split_sample_scenario(&dgp, &cfg.learner, &kernel, reps, cfg.seed)?
    } else {
        let entries = if cfg.estimators.is_empty() {
            vec![EstimatorEntry { tag: "D-RSMD".into(), instruments: vec!["Z1".into()] }]
        } else {
            cfg.estimators.clone()
        };
        let specs = entries
            .iter()
            .map(|e| {
                let tag = parse_tag(&e.tag)?;
                let label = if e.instruments.is_empty() { "Z1".to_string() } else { e.instruments.join(", ") };
                let set = InstrumentSet::parse(&label)
                    .ok_or_else(|| CliError::Config(format!("unknown simulation instrument set '{label}'")))?;
                Ok(EstimatorSpec::new(tag, set))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let mut exp = ExperimentConfig::new(dgp, specs, reps, cfg.seed);
        exp.learner = cfg.learner.clone();
        exp.kernel = kernel;
        run_experiment(&exp)?
    };
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let out = MetricsOutput { rows: result.rows, identification: Vec::new(), warnings: result.warnings };
    let (main, json) = metrics_main(cfg, &out)?;
    emit(cfg.output.as_ref(), &main, (cfg.format != OutputFormat::Json).then_some(json.as_str()))
}

/// Exit status 4 when any matrix is exactly singular or crosses the estimation threshold.
pub fn identify(cfg: &RunConfig) -> Result<bool, CliError> {
    let opts = cfg.identification_options();
    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    if let Some(name) = &cfg.identify.catalog {
        let case =
            CatalogCase::parse(name).ok_or_else(|| CliError::Config(format!("unknown catalog model '{name}'")))?;
        for (set, r) in catalog_identification(case, cfg.identify.n, cfg.seed, &opts)? {
            rows.push(IdentificationRow::new(&set, &r));
        }
        if let Some(reps) = cfg.reps.or(cfg.identify.reps) {
            metrics = appendix_catalog_run(case, cfg.identify.n, reps, cfg.seed)?;
        }
    } else {
        let (data, spec, warnings) = load_data(cfg)?;
        for w in &warnings {
            eprintln!("warning: {w}");
        }
        let design = build_design(&data, &spec)?;
        let mut pipe = Pipeline { cfg, data: &data, design, fits: None, kernels: HashMap::new() };
        for e in default_entries(cfg) {
            let tag = parse_tag(&e.tag)?;
            let names = if e.instruments.is_empty() { spec.instruments.clone() } else { e.instruments.clone() };
            let report = match tag {
                EstimatorTag::Drsmd => {
                    let corr = pipe.correction(&names)?;
                    identification_report_with(tag, pipe.fits.as_ref().unwrap(), Some(&corr), &pipe.kernels[&names], &opts)?
                }
                EstimatorTag::Rsmd => {
                    pipe.kernel(&names)?;
                    pipe.fits()?;
                    identification_report_with(tag, pipe.fits.as_ref().unwrap(), None, &pipe.kernels[&names], &opts)?
                }
                EstimatorTag::Smd => {
                    pipe.kernel(&names)?;
                    let raw = NuisanceFits::untransformed(&pipe.design.y, &pipe.design.p);
                    identification_report_with(tag, &raw, None, &pipe.kernels[&names], &opts)?
                }
                other => {
                    return Err(CliError::Config(format!(
                        "identification reports cover SMD, RSMD and D-RSMD, not {}",
                        other.label()
                    )))
                }
            };
            rows.push(IdentificationRow::new(&instrument_label(&names), &report));
        }
    }
    let failed = rows
        .iter()
        .any(|r| r.verdict == "Singular" || r.condition_number > drsmd::estimators::MAX_CONDITION);
    let out = MetricsOutput { rows: metrics, identification: rows, warnings: Vec::new() };
    let (main, json) = match cfg.format {
        OutputFormat::Csv => {
            let mut s = String::from("estimator,instruments,verdict,condition_number,standardized_min_singular_value,sampling_noise,singular_values\n");
            for r in &out.identification {
                let sv: Vec<String> = r.singular_values.iter().map(|v| v.to_string()).collect();
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    quote(&r.estimator),
                    quote(&r.instruments),
                    r.verdict,
                    r.condition_number,
                    r.standardized_min_singular_value,
                    r.sampling_noise.map(|v| v.to_string()).unwrap_or_default(),
                    sv.join(";")
                ));
            }
            if !out.rows.is_empty() {
                s.push('\n');
                s.push_str(&metrics_csv(&out.rows));
            }
            (s, to_json(&out)?)
        }
        _ => metrics_main(cfg, &out)?,
    };
    emit(cfg.output.as_ref(), &main, (cfg.format != OutputFormat::Json).then_some(json.as_str()))?;
    Ok(failed)
}
