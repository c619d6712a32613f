//! Datasets, model specifications and design-matrix assembly.
//!
//! The treatment block is `P = [W, W * X1_1, ..., W * X1_q]`, so the
//! parameter vector has length `1 + q` where `q` is the number of
//! interaction covariates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-oriented numeric observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl Dataset {
    /// Builds a dataset, rejecting ragged, non-finite or duplicate columns.
    pub fn new(columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let n = columns.first().map(|c| c.1.len()).unwrap_or(0);
        let mut names = Vec::with_capacity(columns.len());
        let mut values = Vec::with_capacity(columns.len());
        for (name, col) in columns {
            if names.contains(&name) {
                return Err(Error::Data(format!("duplicate column name '{name}'")));
            }
            if col.len() != n {
                return Err(Error::Data(format!(
                    "column '{name}' has length {} but expected {n}",
                    col.len()
                )));
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("column '{name}' has a non-finite value at row {i}")));
            }
            names.push(name);
            values.push(col);
        }
        if n < 2 {
            return Err(Error::InsufficientData { n, required: 2 });
        }
        Ok(Self { n, names, columns: values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|c| c == name).map(|i| self.columns[i].as_slice())
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names.iter().map(String::as_str).zip(self.columns.iter().map(Vec::as_slice))
    }

    /// Rows in the given order (indices may repeat).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let cols = self
            .names
            .iter()
            .zip(&self.columns)
            .map(|(name, col)| (name.clone(), rows.iter().map(|&r| col[r]).collect()))
            .collect();
        Self::new(cols)
    }
}

/// Roles of the dataset columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModelSpec {
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub interaction_covariates: Vec<String>,
    #[serde(default)]
    pub controls: Vec<String>,
    pub instruments: Vec<String>,
}

impl ModelSpec {
    /// Parameter dimension `1 + q_X1`.
    pub fn p(&self) -> usize {
        1 + self.interaction_covariates.len()
    }

    fn referenced(&self) -> impl Iterator<Item = &String> {
        std::iter::once(&self.outcome)
            .chain(std::iter::once(&self.treatment))
            .chain(&self.interaction_covariates)
            .chain(&self.controls)
            .chain(&self.instruments)
    }

    /// Names of the parameters in `P` order.
    pub fn parameter_names(&self) -> Vec<String> {
        std::iter::once(self.treatment.clone())
            .chain(self.interaction_covariates.iter().map(|x| format!("{}:{}", self.treatment, x)))
            .collect()
    }
}

/// Treatment-effect coefficients split by role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub theta_w: f64,
    pub theta_wx: Vec<f64>,
}

impl ParameterVector {
    pub fn from_slice(v: &[f64]) -> Self {
        Self { theta_w: v[0], theta_wx: v[1..].to_vec() }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        std::iter::once(self.theta_w).chain(self.theta_wx.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        1 + self.theta_wx.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Matrices consumed by the estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub y: DVector<f64>,
    /// Treatment block, `n x p`.
    pub p: DMatrix<f64>,
    /// Controls, `n x q_X`.
    pub x: DMatrix<f64>,
    /// Instruments, `n x q_z`.
    pub z: DMatrix<f64>,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Assembles a design from precomputed blocks.
    pub fn from_parts(y: DVector<f64>, p: DMatrix<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if p.nrows() != n || x.nrows() != n || z.nrows() != n {
            return Err(Error::Data("design blocks have mismatched row counts".into()));
        }
        Ok(Self { y, p, x, z })
    }
}

fn matrix_from_columns(data: &Dataset, names: &[String]) -> Result<DMatrix<f64>> {
    let n = data.n();
    let mut m = DMatrix::zeros(n, names.len());
    for (k, name) in names.iter().enumerate() {
        let col = data
            .column(name)
            .ok_or_else(|| Error::Spec(format!("column '{name}' not found")))?;
        m.column_mut(k).copy_from_slice(col);
    }
    Ok(m)
}

/// Assembles `y`, `P = [W, W*X1]`, `X` and `Z`.
pub fn build_design(data: &Dataset, spec: &ModelSpec) -> Result<DesignMatrices> {
    if spec.instruments.is_empty() {
        return Err(Error::Spec("at least one instrument is required".into()));
    }
    for name in spec.referenced() {
        if data.column(name).is_none() {
            return Err(Error::Spec(format!("column '{name}' not found")));
        }
    }
    let n = data.n();
    let p_dim = spec.p();
    if n < p_dim + 2 {
        return Err(Error::InsufficientData { n, required: p_dim + 2 });
    }
    let y = DVector::from_column_slice(data.column(&spec.outcome).unwrap());
    let w = data.column(&spec.treatment).unwrap();
    let mut p = DMatrix::zeros(n, p_dim);
    p.column_mut(0).copy_from_slice(w);
    for (k, name) in spec.interaction_covariates.iter().enumerate() {
        let x1 = data.column(name).unwrap();
        for i in 0..n {
            p[(i, k + 1)] = w[i] * x1[i];
        }
    }
    let x = matrix_from_columns(data, &spec.controls)?;
    let z = matrix_from_columns(data, &spec.instruments)?;
    Ok(DesignMatrices { y, p, x, z })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Issue {
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
    pub n: usize,
    pub p: usize,
    pub q_x: usize,
    pub q_z: usize,
}

impl ValidationReport {
    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::Error)
    }
}

fn is_constant(col: &[f64]) -> bool {
    col.iter().all(|&v| v == col[0])
}

/// Report-only check of a dataset against a spec.
pub fn validate(data: &Dataset, spec: &ModelSpec) -> ValidationReport {
    let mut issues = Vec::new();
    let mut push = |severity, message: String| issues.push(Issue { severity, message });
    for name in spec.referenced() {
        if data.column(name).is_none() {
            push(Severity::Error, format!("column '{name}' not found"));
        }
    }
    if spec.instruments.is_empty() {
        push(Severity::Error, "no instrument declared".into());
    }
    if data.n() < spec.p() + 2 {
        push(Severity::Error, format!("n = {} is below p + 2 = {}", data.n(), spec.p() + 2));
    }
    if let Some(w) = data.column(&spec.treatment) {
        if is_constant(w) {
            push(Severity::Warning, format!("treatment '{}' is constant", spec.treatment));
        }
    }
    for name in &spec.instruments {
        if let Some(z) = data.column(name) {
            if is_constant(z) {
                push(Severity::Warning, format!("instrument has zero variance: '{name}'"));
            }
        }
    }
    for name in &spec.controls {
        if let Some(x) = data.column(name) {
            if is_constant(x) {
                push(Severity::Warning, format!("control '{name}' is constant and will be dropped"));
            }
        }
    }
    ValidationReport {
        issues,
        n: data.n(),
        p: spec.p(),
        q_x: spec.controls.len(),
        q_z: spec.instruments.len(),
    }
}

/// Column-length check for raw column input, reported as hard errors.
pub fn validate_raw(columns: &[(String, Vec<f64>)]) -> Vec<Issue> {
    let mut issues = Vec::new();
    let n = columns.first().map(|c| c.1.len()).unwrap_or(0);
    for (name, col) in columns {
        if col.len() != n {
            issues.push(Issue {
                severity: Severity::Error,
                message: format!("column '{name}' has length {} but expected {n}", col.len()),
            });
        }
        if col.iter().any(|v| !v.is_finite()) {
            issues.push(Issue { severity: Severity::Error, message: format!("column '{name}' has non-finite values") });
        }
    }
    issues
}
