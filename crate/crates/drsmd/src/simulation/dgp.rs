//! Benchmark data-generating process.
//!
//! ```text
//! W = 1(a0 Z + a3 Z^3 + sum_{q<=S} (c1 X_q + c3 X_q^3) > -v)
//! y = theta_w W + theta_wx W X_1 + sum_{q<=S} (b1 X_q + b2 X_q^2) + eps
//! X = X* + 0.4 Z,  (eps, v) bivariate normal with unit variances
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, DesignMatrices};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DgpInstrument {
    /// Binary `Z1 ~ Bernoulli(p_z1)`.
    Z1,
    /// Three-valued `Z2 = Z1 + B`.
    Z2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum X1Kind {
    Continuous,
    /// `X1 ~ Bernoulli(prob)`, drawn independently of the instruments.
    Binary(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub q_x: usize,
    /// Number of covariates with nonzero coefficients (capped at `q_x` and `max_active`).
    pub s: usize,
    pub max_active: usize,
    pub theta_w0: f64,
    pub theta_wx0: f64,
    pub theta_z0: f64,
    pub theta_z3: f64,
    pub alpha_1: f64,
    pub alpha_3: f64,
    pub beta_1: f64,
    pub beta_2: f64,
    pub instrument_in_dgp: DgpInstrument,
    pub x1_kind: X1Kind,
    pub error_cov: f64,
    pub z_coupling: f64,
    pub p_z1: f64,
    pub p_b: f64,
}

impl Default for DgpConfig {
    // 0.318 is the instrument's mean, not 1/pi.
    #[allow(clippy::approx_constant)]
    fn default() -> Self {
        Self {
            n: 3000,
            q_x: 3,
            s: 5,
            max_active: usize::MAX,
            theta_w0: 2.0,
            theta_wx0: 3.0,
            theta_z0: 3.0,
            theta_z3: 4.0,
            alpha_1: 1.0,
            alpha_3: 2.0,
            beta_1: 1.0,
            beta_2: -3.0,
            instrument_in_dgp: DgpInstrument::Z1,
            x1_kind: X1Kind::Continuous,
            error_cov: 4.0 / 9.0,
            z_coupling: 0.4,
            p_z1: 0.318,
            p_b: 0.35,
        }
    }
}

impl DgpConfig {
    pub fn benchmark(n: usize, q_x: usize) -> Self {
        Self { n, q_x, ..Self::default() }
    }

    /// Three-valued instrument drives treatment; ten nominal nonzeros, five active.
    pub fn categorical(n: usize, q_x: usize) -> Self {
        Self { n, q_x, s: 10, max_active: 5, instrument_in_dgp: DgpInstrument::Z2, ..Self::default() }
    }

    pub fn s_eff(&self) -> usize {
        self.s.min(self.q_x).min(self.max_active)
    }

    pub fn theta0(&self) -> Vec<f64> {
        vec![self.theta_w0, self.theta_wx0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 100 {
            return Err(Error::Config(format!("n = {} is below 100", self.n)));
        }
        if self.q_x == 0 || self.s == 0 {
            return Err(Error::Config("need at least one covariate and one active coefficient".into()));
        }
        if !(self.error_cov.abs() < 1.0) {
            return Err(Error::Config("error covariance must lie in (-1, 1)".into()));
        }
        let probs = [self.p_z1, self.p_b];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("Bernoulli probabilities must lie in [0, 1]".into()));
        }
        if let X1Kind::Binary(p) = self.x1_kind {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config("binary covariate probability must lie in [0, 1]".into()));
            }
        }
        let params = [
            self.theta_w0, self.theta_wx0, self.theta_z0, self.theta_z3, self.alpha_1, self.alpha_3, self.beta_1,
            self.beta_2, self.z_coupling,
        ];
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("DGP parameters must be finite".into()));
        }
        Ok(())
    }
}

/// One simulated sample with the pieces the estimators need.
#[derive(Debug, Clone)]
pub struct BenchmarkSample {
    pub design: DesignMatrices,
    pub z1: DVector<f64>,
    pub z2: DVector<f64>,
    /// The true control function's features `X_q, X_q^2` for active `q`.
    pub true_f_features: DMatrix<f64>,
}

impl BenchmarkSample {
    pub fn x1(&self) -> DVector<f64> {
        self.design.x.column(0).into_owned()
    }

    /// Columns `y, W, X1..Xq, Z1, Z2`.
    pub fn to_dataset(&self) -> Dataset {
        let d = &self.design;
        let mut cols = vec![("y".to_string(), d.y.as_slice().to_vec()), ("W".to_string(), d.p.column(0).iter().copied().collect())];
        for q in 0..d.x.ncols() {
            cols.push((format!("X{}", q + 1), d.x.column(q).iter().copied().collect()));
        }
        cols.push(("Z1".to_string(), self.z1.as_slice().to_vec()));
        cols.push(("Z2".to_string(), self.z2.as_slice().to_vec()));
        Dataset::new(cols).expect("simulated columns are well formed")
    }
}

fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// Draws a benchmark sample. The random stream is consumed row by row.
pub fn generate_benchmark<R: Rng>(cfg: &DgpConfig, rng: &mut R) -> Result<BenchmarkSample> {
    cfg.validate()?;
    let (n, q) = (cfg.n, cfg.q_x);
    let active = cfg.s_eff();
    let rho = cfg.error_cov;
    let mut y = DVector::zeros(n);
    let mut p = DMatrix::zeros(n, 2);
    let mut x = DMatrix::zeros(n, q);
    let mut z1 = DVector::zeros(n);
    let mut z2 = DVector::zeros(n);
    for i in 0..n {
        let a = bernoulli(rng, cfg.p_z1);
        let b = bernoulli(rng, cfg.p_b);
        z1[i] = a;
        z2[i] = a + b;
        let zd = match cfg.instrument_in_dgp {
            DgpInstrument::Z1 => a,
            DgpInstrument::Z2 => a + b,
        };
        for c in 0..q {
            let star: f64 = rng.sample(StandardNormal);
            x[(i, c)] = star + cfg.z_coupling * zd;
        }
        if let X1Kind::Binary(prob) = cfg.x1_kind {
            x[(i, 0)] = bernoulli(rng, prob);
        }
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let v = e1;
        let eps = rho * e1 + (1.0 - rho * rho).sqrt() * e2;
        let mut index = cfg.theta_z0 * zd + cfg.theta_z3 * zd.powi(3);
        let mut f = 0.0;
        for c in 0..active {
            let xc = x[(i, c)];
            index += cfg.alpha_1 * xc + cfg.alpha_3 * xc.powi(3);
            f += cfg.beta_1 * xc + cfg.beta_2 * xc * xc;
        }
        let w = if index > -v { 1.0 } else { 0.0 };
        p[(i, 0)] = w;
        p[(i, 1)] = w * x[(i, 0)];
        y[i] = cfg.theta_w0 * w + cfg.theta_wx0 * w * x[(i, 0)] + f + eps;
    }
    let mut true_f = DMatrix::zeros(n, 2 * active);
    for c in 0..active {
        for i in 0..n {
            true_f[(i, 2 * c)] = x[(i, c)];
            true_f[(i, 2 * c + 1)] = x[(i, c)] * x[(i, c)];
        }
    }
    let zd = match cfg.instrument_in_dgp {
        DgpInstrument::Z1 => z1.clone(),
        DgpInstrument::Z2 => z2.clone(),
    };
    let design = DesignMatrices::from_parts(y, p, x, DMatrix::from_column_slice(n, 1, zd.as_slice()))?;
    Ok(BenchmarkSample { design, z1, z2, true_f_features: true_f })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn treatment_is_binary_and_outcome_finite() {
        let s = generate_benchmark(&DgpConfig::benchmark(500, 3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.design.p.column(0).iter().all(|w| *w == 0.0 || *w == 1.0));
        assert!(s.design.y.iter().all(|v| v.is_finite()));
        assert_eq!(s.true_f_features.ncols(), 6);
    }

    #[test]
    fn outcome_equation_holds_without_noise_shift() {
        let mut cfg = DgpConfig::benchmark(200, 2);
        cfg.beta_2 = 0.0;
        cfg.beta_1 = 0.0;
        let s = generate_benchmark(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let d = &s.design;
        for i in 0..200 {
            let signal = 2.0 * d.p[(i, 0)] + 3.0 * d.p[(i, 1)];
            assert!((d.y[i] - signal).abs() < 6.0);
        }
    }

    #[test]
    fn moments_at_moderate_n() {
        let n = 200_000;
        let instrument_mean = 318.0 / 1000.0;
        let mut cfg = DgpConfig::benchmark(n, 1);
        cfg.s = 1;
        let s = generate_benchmark(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mz = s.z1.mean();
        assert!((mz - instrument_mean).abs() < 0.005);
        let m2 = s.z2.mean();
        let cov = s.z1.iter().zip(s.z2.iter()).map(|(a, b)| (a - mz) * (b - m2)).sum::<f64>() / n as f64;
        let v1 = s.z1.iter().map(|a| (a - mz).powi(2)).sum::<f64>() / n as f64;
        let v2 = s.z2.iter().map(|b| (b - m2).powi(2)).sum::<f64>() / n as f64;
        assert!((cov / (v1 * v2).sqrt() - 0.7).abs() < 0.02);
        let xm = s.design.x.column(0).mean();
        assert!((xm - 0.4 * instrument_mean).abs() < 0.01);
    }

    #[test]
    fn binary_covariate_and_categorical_layout() {
        let mut cfg = DgpConfig::benchmark(2000, 4);
        cfg.x1_kind = X1Kind::Binary(0.2);
        let s = generate_benchmark(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(s.x1().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!((s.x1().mean() - 0.2).abs() < 0.04);
        let cat = DgpConfig::categorical(3000, 30);
        assert_eq!(cat.s_eff(), 5);
        assert_eq!(DgpConfig::benchmark(3000, 3).s_eff(), 3);
    }

    #[test]
    fn dataset_export_has_expected_columns() {
        let s = generate_benchmark(&DgpConfig::benchmark(150, 2), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let d = s.to_dataset();
        assert_eq!(d.names(), &["y", "W", "X1", "X2", "Z1", "Z2"]);
    }
}
