//! Monte Carlo summary statistics and their tabular renderings.

use serde::Serialize;

use crate::estimators::normal_critical_value;
use crate::numeric::{mean, median, sample_sd};

/// Summary of one estimator-parameter pair across replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub estimator: String,
    pub instruments: String,
    pub parameter: String,
    pub med_bias: f64,
    pub mad: f64,
    pub med_se: f64,
    pub rr: f64,
    pub mean_bias: f64,
    /// Mean of the per-replication asymptotic standard errors.
    pub mean_se: f64,
    /// Standard deviation of the estimates across replications.
    pub sd_estimate: f64,
    pub reps: usize,
    pub failures: usize,
}

/// Aggregates successful draws `(estimate, se)` around the true value.
pub fn summarize(
    estimator: &str,
    instruments: &str,
    parameter: &str,
    truth: f64,
    draws: &[(f64, f64)],
    failures: usize,
) -> MetricsRow {
    let crit = normal_critical_value(0.05);
    let bias: Vec<f64> = draws.iter().map(|(t, _)| t - truth).collect();
    let abs: Vec<f64> = bias.iter().map(|b| b.abs()).collect();
    let se: Vec<f64> = draws.iter().map(|(_, s)| *s).collect();
    let est: Vec<f64> = draws.iter().map(|(t, _)| *t).collect();
    let rejections = draws.iter().filter(|(t, s)| ((t - truth) / s).abs() > crit).count();
    MetricsRow {
        estimator: estimator.into(),
        instruments: instruments.into(),
        parameter: parameter.into(),
        med_bias: median(&bias),
        mad: median(&abs),
        med_se: median(&se),
        rr: if draws.is_empty() { f64::NAN } else { rejections as f64 / draws.len() as f64 },
        mean_bias: mean(&bias),
        mean_se: mean(&se),
        sd_estimate: if draws.len() > 1 { sample_sd(&est) } else { 0.0 },
        reps: draws.len() + failures,
        failures,
    }
}

const HEADER: [&str; 12] = [
    "estimator", "instruments", "parameter", "med_bias", "mad", "med_se", "rr", "mean_bias", "mean_se", "sd_estimate",
    "reps", "failures",
];

fn fields(r: &MetricsRow) -> Vec<String> {
    vec![
        r.estimator.clone(),
        r.instruments.clone(),
        r.parameter.clone(),
        format!("{:.6}", r.med_bias),
        format!("{:.6}", r.mad),
        format!("{:.6}", r.med_se),
        format!("{:.6}", r.rr),
        format!("{:.6}", r.mean_bias),
        format!("{:.6}", r.mean_se),
        format!("{:.6}", r.sd_estimate),
        r.reps.to_string(),
        r.failures.to_string(),
    ]
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Comma-separated rendering with a header and fixed six-decimal numbers.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&fields(r).iter().map(|f| quote(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Aligned table in the column order Med.Bias, MAD, Med.SE, RR.
pub fn metrics_text(rows: &[MetricsRow]) -> String {
    let head = ["Estimator", "Instrument", "Param", "Med.Bias", "MAD", "Med.SE", "RR", "Mean.Bias", "Mean.SE", "SD", "Fail"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.estimator.clone(),
                r.instruments.clone(),
                r.parameter.clone(),
                format!("{:.3}", r.med_bias),
                format!("{:.3}", r.mad),
                format!("{:.3}", r.med_se),
                format!("{:.3}", r.rr),
                format!("{:.3}", r.mean_bias),
                format!("{:.3}", r.mean_se),
                format!("{:.3}", r.sd_estimate),
                r.failures.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain(std::iter::once(head[c].len())).max().unwrap())
        .collect();
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .enumerate()
            .map(|(c, s)| if c < 3 { format!("{:<w$}", s, w = widths[c]) } else { format!("{:>w$}", s, w = widths[c]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(head.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    for r in body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
